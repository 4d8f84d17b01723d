use crate::error::{Error, Result};

/// `exp(-Σ p ln p)` of a code-count histogram, with `0 ln 0 = 0`.
pub fn perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Input("perplexity of an empty histogram".into()));
    }
    let mut used = histogram.iter().filter(|&&c| c > 0);
    let first = *used.next().expect("nonzero total");
    let mut m = 1u64;
    if used.all(|&c| {
        m += 1;
        c == first
    }) {
        // Uniform over m codes: the entropy is exactly ln m.
        return Ok(m as f64);
    }
    let n = total as f64;
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Fraction of codes with a nonzero count.
pub fn usage(histogram: &[u64]) -> f64 {
    if histogram.is_empty() {
        return 0.0;
    }
    histogram.iter().filter(|&&c| c > 0).count() as f64 / histogram.len() as f64
}

/// Mean perplexity and usage over several codebooks' histograms.
pub fn mean_perplexity_usage(histograms: &[Vec<u64>]) -> Result<(f64, f64)> {
    if histograms.is_empty() {
        return Err(Error::Input("no histograms".into()));
    }
    let mut p = 0.0;
    let mut u = 0.0;
    for h in histograms {
        p += perplexity(h)?;
        u += usage(h);
    }
    let n = histograms.len() as f64;
    Ok((p / n, u / n))
}
