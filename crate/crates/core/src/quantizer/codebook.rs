use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// One EMA-learned codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub n_codes: usize,
    pub dim: usize,
    /// `[n_codes, dim]` row-major.
    pub embeddings: Vec<f32>,
    pub cluster_size: Vec<f32>,
    /// `[n_codes, dim]` row-major.
    pub embed_sum: Vec<f32>,
    /// Consecutive updates in which each code received no assignment.
    pub staleness: Vec<u32>,
    pub initialized: bool,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn zeros(n_codes: usize, dim: usize) -> Self {
        Self {
            n_codes,
            dim,
            embeddings: vec![0.0; n_codes * dim],
            cluster_size: vec![0.0; n_codes],
            embed_sum: vec![0.0; n_codes * dim],
            staleness: vec![0; n_codes],
            initialized: false,
        }
    }

    /// A fixed codebook from explicit rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("codebook rows must be nonempty and equal length".into()));
        }
        let embeddings: Vec<f32> = rows.concat();
        Ok(Self {
            n_codes: rows.len(),
            dim,
            cluster_size: vec![1.0; rows.len()],
            embed_sum: embeddings.clone(),
            embeddings,
            staleness: vec![0; rows.len()],
            initialized: true,
        })
    }

    pub fn code(&self, k: usize) -> &[f32] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest code by squared L2 distance; ties resolve to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (u32, f32) {
        let mut best = (0u32, f32::INFINITY);
        for k in 0..self.n_codes {
            let d = sq_dist(x, self.code(k));
            if d < best.1 {
                best = (k as u32, d);
            }
        }
        best
    }

    /// Nearest code for each row of `vectors` (`[n, dim]`).
    pub fn assign(&self, vectors: &[f32]) -> Vec<u32> {
        vectors.chunks_exact(self.dim).map(|v| self.nearest(v).0).collect()
    }

    /// Seed codes from data rows with D²-weighted (k-means++) sampling.
    pub fn init_from_data<R: Rng>(&mut self, vectors: &[f32], rng: &mut R) -> Result<()> {
        let n = vectors.len() / self.dim;
        if n == 0 || vectors.len() % self.dim != 0 {
            return Err(Error::Input("codebook initialisation needs at least one data row".into()));
        }
        let row = |i: usize| &vectors[i * self.dim..(i + 1) * self.dim];
        let first = rng.gen_range(0..n);
        self.embeddings[..self.dim].copy_from_slice(row(first));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)) as f64).collect();
        for k in 1..self.n_codes {
            let pick = match WeightedIndex::new(&d2) {
                Ok(w) => w.sample(rng),
                // every row already coincides with a chosen code
                Err(_) => rng.gen_range(0..n),
            };
            self.embeddings[k * self.dim..(k + 1) * self.dim].copy_from_slice(row(pick));
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(row(i), row(pick)) as f64);
            }
        }
        self.embed_sum.copy_from_slice(&self.embeddings);
        self.cluster_size.iter_mut().for_each(|c| *c = 1.0);
        self.staleness.iter_mut().for_each(|s| *s = 0);
        self.initialized = true;
        Ok(())
    }

    /// Per-code assignment counts and vector sums.
    pub fn batch_stats(&self, indices: &[u32], vectors: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let mut counts = vec![0.0f64; self.n_codes];
        let mut sums = vec![0.0f64; self.n_codes * self.dim];
        for (&k, v) in indices.iter().zip(vectors.chunks_exact(self.dim)) {
            let k = k as usize;
            counts[k] += 1.0;
            for (s, &x) in sums[k * self.dim..(k + 1) * self.dim].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        (counts, sums)
    }

    /// Exponential-moving-average update from one batch of assignments.
    ///
    /// `N ← dN + (1-d)n`, `S ← dS + (1-d)s`, and each embedding becomes `S`
    /// divided by the Laplace-smoothed cluster size
    /// `(N + ε) / (ΣN + Kε) · ΣN`.
    pub fn ema_update(&mut self, indices: &[u32], vectors: &[f32], decay: f64, eps: f64) -> Result<()> {
        if vectors.len() != indices.len() * self.dim {
            return Err(Error::shape("ema_update vectors", &[indices.len(), self.dim], &[vectors.len()]));
        }
        if let Some(&k) = indices.iter().find(|&&k| k as usize >= self.n_codes) {
            return Err(Error::Input(format!("code index {k} out of range")));
        }
        let (counts, sums) = self.batch_stats(indices, vectors);
        for k in 0..self.n_codes {
            self.cluster_size[k] = (decay * self.cluster_size[k] as f64 + (1.0 - decay) * counts[k]) as f32;
            self.staleness[k] = if counts[k] > 0.0 { 0 } else { self.staleness[k].saturating_add(1) };
        }
        for (s, &b) in self.embed_sum.iter_mut().zip(&sums) {
            *s = (decay * *s as f64 + (1.0 - decay) * b) as f32;
        }
        let total: f64 = self.cluster_size.iter().map(|&c| c as f64).sum();
        let k_eps = self.n_codes as f64 * eps;
        for k in 0..self.n_codes {
            let smoothed = (self.cluster_size[k] as f64 + eps) / (total + k_eps) * total;
            if smoothed > 0.0 {
                for d in 0..self.dim {
                    let i = k * self.dim + d;
                    self.embeddings[i] = (self.embed_sum[i] as f64 / smoothed) as f32;
                }
            }
        }
        Ok(())
    }

    /// Replace every code stale for at least `threshold` updates by a donor
    /// row, drawn with probability proportional to its squared distance to
    /// the nearest current code. Returns the number of codes replaced.
    pub fn reseed_dead_codes<R: Rng>(&mut self, donors: &[f32], threshold: u32, rng: &mut R) -> usize {
        let n = donors.len() / self.dim;
        let dead: Vec<usize> = (0..self.n_codes).filter(|&k| self.staleness[k] >= threshold).collect();
        if dead.is_empty() || n == 0 {
            return 0;
        }
        let row = |i: usize| &donors[i * self.dim..(i + 1) * self.dim];
        let mut d2: Vec<f64> = (0..n).map(|i| self.nearest(row(i)).1 as f64).collect();
        for &k in &dead {
            let pick = match WeightedIndex::new(&d2) {
                Ok(w) => w.sample(rng),
                Err(_) => rng.gen_range(0..n),
            };
            let donor = row(pick).to_vec();
            self.embeddings[k * self.dim..(k + 1) * self.dim].copy_from_slice(&donor);
            self.embed_sum[k * self.dim..(k + 1) * self.dim].copy_from_slice(&donor);
            self.cluster_size[k] = 1.0;
            self.staleness[k] = 0;
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(row(i), &donor) as f64);
            }
        }
        dead.len()
    }

    pub fn export(&self, prefix: &str, store: &mut ParamStore) {
        let (k, d) = (self.n_codes, self.dim);
        let t = |shape: Vec<usize>, v: &[f32]| Tensor::new(shape, v.to_vec()).expect("codebook shape");
        store.insert(format!("{prefix}/embeddings"), t(vec![k, d], &self.embeddings));
        store.insert(format!("{prefix}/ema_cluster_size"), t(vec![k], &self.cluster_size));
        store.insert(format!("{prefix}/ema_embed_sum"), t(vec![k, d], &self.embed_sum));
        let stale: Vec<f32> = self.staleness.iter().map(|&s| s as f32).collect();
        store.insert(format!("{prefix}/staleness"), t(vec![k], &stale));
        store.insert(format!("{prefix}/initialized"), t(vec![1], &[self.initialized as u8 as f32]));
    }

    pub fn import(prefix: &str, store: &ParamStore, n_codes: usize, dim: usize) -> Result<Self> {
        let get = |suffix: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let name = format!("{prefix}/{suffix}");
            let t = store.get(&name)?;
            if t.shape() != shape {
                return Err(Error::shape(format!("tensor `{name}`"), shape, t.shape()));
            }
            Ok(t.data().to_vec())
        };
        Ok(Self {
            n_codes,
            dim,
            embeddings: get("embeddings", &[n_codes, dim])?,
            cluster_size: get("ema_cluster_size", &[n_codes])?,
            embed_sum: get("ema_embed_sum", &[n_codes, dim])?,
            staleness: get("staleness", &[n_codes])?.into_iter().map(|v| v as u32).collect(),
            initialized: get("initialized", &[1])?[0] != 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_matches_brute_force() {
        let cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [rng.gen_range(-2.0f32..2.0), rng.gen_range(-2.0f32..2.0)];
            let table: Vec<f64> = (0..4)
                .map(|k| {
                    let c = cb.code(k);
                    ((x[0] - c[0]) as f64).powi(2) + ((x[1] - c[1]) as f64).powi(2)
                })
                .collect();
            let want = (0..4).min_by(|&a, &b| table[a].partial_cmp(&table[b]).unwrap()).unwrap();
            assert_eq!(cb.nearest(&x).0 as usize, want);
        }
    }

    #[test]
    fn ema_follows_closed_form() {
        // Repeated identical batch: N_t = c + d^t (N_0 - c), S_t likewise, so the
        // error to the centroid shrinks geometrically.
        let mut cb = Codebook::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
        let vectors = [1.0f32, 2.0, 3.0, 2.0];
        let idx = [0u32, 0];
        let mut prev_err = f64::INFINITY;
        for _ in 0..30 {
            cb.ema_update(&idx, &vectors, 0.8, 1e-5).unwrap();
            let e = cb.code(0);
            let err = ((e[0] - 2.0) as f64).hypot((e[1] - 2.0) as f64);
            assert!(err < prev_err);
            prev_err = err;
        }
        assert!(prev_err < 1e-2, "{prev_err}");
        // cluster_size closed form
        let want = 2.0 + 0.8f64.powi(30) * (1.0 - 2.0);
        assert!((cb.cluster_size[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn unused_code_keeps_embedding() {
        let mut cb = Codebook::from_rows(&[vec![0.0], vec![5.0]]).unwrap();
        cb.ema_update(&[0, 0, 0], &[1.0, 1.0, 1.0], 0.8, 1e-5).unwrap();
        assert!((cb.code(1)[0] - 5.0).abs() < 1e-3);
        assert_eq!(cb.staleness, vec![0, 1]);
    }

    #[test]
    fn reseed_replaces_only_stale_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::from_rows(&[vec![0.0], vec![5.0], vec![9.0]]).unwrap();
        let before = cb.clone();
        assert_eq!(cb.reseed_dead_codes(&[1.0, 2.0], 3, &mut rng), 0);
        assert_eq!(cb, before);
        cb.staleness[1] = 3;
        assert_eq!(cb.reseed_dead_codes(&[1.0, 2.0], 3, &mut rng), 1);
        assert_eq!(cb.code(0), before.code(0));
        assert_eq!(cb.code(2), before.code(2));
        assert!(cb.code(1) == [1.0] || cb.code(1) == [2.0]);
        assert_eq!(cb.staleness[1], 0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = Codebook::zeros(4, 2);
        cb.init_from_data(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &mut rng).unwrap();
        let mut s = ParamStore::new();
        cb.export("vq/0/0", &mut s);
        assert_eq!(Codebook::import("vq/0/0", &s, 4, 2).unwrap(), cb);
        assert!(Codebook::import("vq/0/0", &s, 5, 2).is_err());
    }
}
