use std::collections::BTreeMap;
use std::path::PathBuf;

use audiocodec::datafilter::*;
use audiocodec::dsp::{write_wav, AudioBuffer, VadConfig};
use audiocodec::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-table edit distance over chars.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Repeated selection of the best remaining record.
fn brute_force(records: &[ScoredRecord], top_k: usize, gate: f64) -> Vec<ScoredRecord> {
    let mut pool: Vec<&ScoredRecord> = records.iter().filter(|r| !(r.vad_proportion > gate)).collect();
    let mut out = Vec::new();
    while out.len() < top_k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (c, b) = (pool[i], pool[best]);
            if c.quality > b.quality || (c.quality == b.quality && c.id < b.id) {
                best = i;
            }
        }
        out.push(pool.remove(best).clone());
    }
    out
}

fn record(id: String, quality: f64, vad: f64) -> ScoredRecord {
    ScoredRecord {
        id,
        audio: PathBuf::from("x.wav"),
        text: String::new(),
        transcript_a: "a".into(),
        transcript_b: "a".into(),
        dnsmos: quality,
        cer: 0.0,
        vad_proportion: vad,
        quality,
    }
}

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredRecord> {
    (0..n)
        .map(|_| {
            // coarse grids force quality ties and values exactly at the gate
            let q = rng.gen_range(0..40) as f64 / 8.0;
            let vad = *[0.0, 0.05, 0.14, 0.1400001, 0.2, 0.9].get(rng.gen_range(0..6)).unwrap();
            record(format!("r{:04}", rng.gen_range(0..5000)), q, vad)
        })
        .collect()
}

#[test]
fn filter_matches_brute_force_on_random_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let recs = random_records(&mut rng, 1000);
    for k in [0, 1, 10, 137, 1000, 5000] {
        assert_eq!(filter_dataset(&recs, k, VAD_THRESHOLD), brute_force(&recs, k, VAD_THRESHOLD), "k = {k}");
    }
    let all = filter_dataset(&recs, usize::MAX, VAD_THRESHOLD);
    assert!(all.iter().all(|r| r.vad_proportion <= 0.14));
    assert!(all.iter().any(|r| r.vad_proportion == 0.14));
}

#[test]
fn gate_and_empty_input() {
    let recs = vec![record("loud".into(), 5.0, 0.2), record("ok".into(), 1.0, 0.1)];
    let out = filter_dataset(&recs, 10, VAD_THRESHOLD);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].id, "ok");
    assert!(filter_dataset(&[], 3, VAD_THRESHOLD).is_empty());
}

fn stub_suite(a: BTreeMap<String, String>, b: BTreeMap<String, String>, dnsmos: f64) -> ScorerSuite {
    ScorerSuite {
        transcriber_a: Box::new(TableTranscriber(a)),
        transcriber_b: Box::new(TableTranscriber(b)),
        quality: Box::new(ConstantScorer(dnsmos)),
        vad: Box::new(EnergyVad(VadConfig::default())),
    }
}

fn wav(dir: &std::path::Path, name: &str, silent_tail: usize) -> PathBuf {
    let mut s: Vec<f32> = (0..8000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    s.extend(std::iter::repeat(0.0).take(silent_tail));
    let p = dir.join(name);
    write_wav(&p, &AudioBuffer::new(s, 8000).unwrap()).unwrap();
    p
}

fn table(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn stub_scores_follow_quality_formula() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        ManifestEntry {
            id: "same".into(),
            audio: wav(dir.path(), "same.wav", 0),
            text: String::new(),
        },
        ManifestEntry {
            id: "diff".into(),
            audio: wav(dir.path(), "diff.wav", 0),
            text: String::new(),
        },
        ManifestEntry {
            id: "missing".into(),
            audio: dir.path().join("nope.wav"),
            text: String::new(),
        },
        ManifestEntry {
            id: "quiet".into(),
            audio: wav(dir.path(), "quiet.wav", 4000),
            text: String::new(),
        },
    ];
    let a = table(&[("same", "hello"), ("diff", "abc"), ("missing", "x"), ("quiet", "q")]);
    let b = table(&[("same", "hello"), ("diff", "abd"), ("missing", "x"), ("quiet", "q")]);
    let suite = stub_suite(a, b, 4.0);
    let out = score_records(&entries, &suite, &ScoreOptions::default());
    assert_eq!(out.scored.len(), 3);
    assert_eq!(out.failed.len(), 1);
    assert_eq!(out.failed[0].id, "missing");
    let by_id: BTreeMap<_, _> = out.scored.iter().map(|r| (r.id.as_str(), r)).collect();
    assert_eq!(by_id["same"].quality, 4.0);
    assert!((by_id["diff"].quality - (4.0 - 1.0 / 3.0)).abs() < 1e-12);
    assert!((by_id["diff"].quality - 3.6667).abs() < 1e-4);
    assert!(by_id["quiet"].vad_proportion > VAD_THRESHOLD);
    for r in &out.scored {
        assert_eq!(r.quality, r.dnsmos - r.cer);
    }

    let c = curate(&entries, &suite, &ScoreOptions::default(), 10, VAD_THRESHOLD);
    let ids: Vec<_> = c.selected.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["same", "diff"]);
    assert_eq!((c.scored, c.vad_excluded, c.failed.len()), (3, 1, 1));

    let mut opts = ScoreOptions::default();
    opts.jobs = 3;
    assert_eq!(score_records(&entries, &suite, &opts), out);
}

#[test]
fn empty_first_transcript_fails_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let e = ManifestEntry {
        id: "e".into(),
        audio: wav(dir.path(), "e.wav", 0),
        text: "reference".into(),
    };
    let suite = stub_suite(table(&[("e", "")]), table(&[("e", "text")]), 3.0);
    assert!(score_record(&e, &suite, &ScoreOptions::default()).is_err());
    let opts = ScoreOptions {
        mode: CerMode::Reference,
        ..ScoreOptions::default()
    };
    let r = score_record(&e, &suite, &opts).unwrap();
    let want = (edit_distance("reference", "") as f64 / 9.0 + edit_distance("reference", "text") as f64 / 9.0) / 2.0;
    assert!((r.cer - want).abs() < 1e-12);
}

#[test]
fn scorer_errors_are_contained() {
    let dir = tempfile::tempdir().unwrap();
    let entries: Vec<ManifestEntry> = (0..4)
        .map(|i| ManifestEntry {
            id: format!("c{i}"),
            audio: wav(dir.path(), &format!("c{i}.wav"), 0),
            text: String::new(),
        })
        .collect();
    let suite = ScorerSuite {
        transcriber_a: Box::new(FnScorer(|r: &ScoreRequest| Ok(r.id.clone()))),
        transcriber_b: Box::new(FnScorer(|r: &ScoreRequest| Ok(r.id.clone()))),
        quality: Box::new(FnScorer(|r: &ScoreRequest| {
            if r.id == "c2" {
                Err(Error::Scorer("model crashed".into()))
            } else {
                Ok(3.5)
            }
        })),
        vad: Box::new(ConstantScorer(0.0)),
    };
    let out = score_records(&entries, &suite, &ScoreOptions::default());
    assert_eq!(out.scored.len(), 3);
    assert!(out.failed[0].reason.contains("model crashed"));
}

#[cfg(unix)]
#[test]
fn command_scorer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("asr.sh");
    // answers in reverse order; one id gets an error
    std::fs::write(
        &script,
        "#!/bin/sh\nsed -n 's/.*\"id\":\"\\([^\"]*\\)\".*/\\1/p' | tac | while read id; do\n  if [ \"$id\" = bad ]; then echo \"{\\\"id\\\":\\\"$id\\\",\\\"error\\\":\\\"unreadable\\\"}\";\n  else echo \"{\\\"id\\\":\\\"$id\\\",\\\"text\\\":\\\"t-$id\\\",\\\"score\\\":4.25}\"; fi\ndone\n",
    )
    .unwrap();
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    let cmd = CommandScorer {
        program: script.clone(),
        args: vec![],
    };
    let reqs: Vec<ScoreRequest> = ["a", "bad", "c"]
        .iter()
        .map(|id| ScoreRequest {
            id: id.to_string(),
            audio: PathBuf::from(format!("{id}.wav")),
        })
        .collect();
    let texts = cmd.transcribe(&reqs);
    assert_eq!(texts[0].as_ref().unwrap(), "t-a");
    assert!(texts[1].as_ref().unwrap_err().to_string().contains("unreadable"));
    assert_eq!(texts[2].as_ref().unwrap(), "t-c");
    let scores = cmd.score(&reqs);
    assert_eq!(*scores[2].as_ref().unwrap(), 4.25);

    let broken = CommandScorer {
        program: dir.path().join("absent"),
        args: vec![],
    };
    assert!(broken.score(&reqs).iter().all(|r| r.is_err()));
}

#[test]
fn kitten_sitting() {
    assert_eq!(cer("kitten", "sitting").unwrap(), 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig { rng_seed: proptest::test_runner::RngSeed::Fixed(3), ..ProptestConfig::default() })]

    #[test]
    fn cer_matches_edit_table(a in "[abcé ]{1,12}", b in "[abcé ]{0,12}") {
        let want = edit_distance(&a, &b) as f64 / a.chars().count() as f64;
        prop_assert_eq!(cer(&a, &b).unwrap(), want);
    }

    #[test]
    fn selection_is_prefix_monotone(seed in 0u64..10_000, k in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = random_records(&mut rng, 80);
        let a = filter_dataset(&recs, k, VAD_THRESHOLD);
        let b = filter_dataset(&recs, k + 1, VAD_THRESHOLD);
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn quality_falls_one_for_one_with_cer(dnsmos in 1.0..5.0f64, extra in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let e = ManifestEntry { id: "p".into(), audio: wav(dir.path(), "p.wav", 0), text: String::new() };
        let base = "abcdefghij";
        let hyp_close = format!("{base}x");
        let hyp_far = format!("{base}{}", "x".repeat(1 + extra));
        let q = |hyp: &str| {
            let s = stub_suite(table(&[("p", base)]), table(&[("p", hyp)]), dnsmos);
            score_record(&e, &s, &ScoreOptions::default()).unwrap()
        };
        let (near, far) = (q(&hyp_close), q(&hyp_far));
        prop_assert!(far.cer > near.cer && far.quality < near.quality);
        prop_assert!(((near.quality - far.quality) - (far.cer - near.cer)).abs() < 1e-12);
    }
}
