#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_benchlab")
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Five labelers tracing two horizontal edges and one vertical edge with
/// decreasing diligence, plus a little jitter and clutter.
pub fn labels_json(image_id: &str, seed: u64) -> String {
    let (w, h) = (96u32, 72u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labelers: Vec<_> = (0..5)
        .map(|l| {
            let mut px = std::collections::BTreeSet::new();
            for c in 4..92 {
                if rng.random::<f64>() < 0.95 {
                    px.insert((20 + rng.random_range(0..2u32), c));
                }
                if rng.random::<f64>() < 0.2 * l as f64 {
                    px.insert((50, c));
                }
            }
            for r in 4..68 {
                if rng.random::<f64>() < 0.5 + 0.1 * l as f64 {
                    px.insert((r, 70));
                }
            }
            for _ in 0..5 {
                px.insert((rng.random_range(0..h), rng.random_range(0..w)));
            }
            json!({ "labeler_id": format!("L{l}"), "pixels": px.into_iter().collect::<Vec<_>>() })
        })
        .collect();
    json!({ "format_version": 1, "image_id": image_id, "width": w, "height": h, "labelers": labelers }).to_string()
}

/// Soft map with strong responses along two edges and faint noise.
pub fn soft_json(seed: u64) -> String {
    let (w, h) = (96usize, 72usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0f64; w * h];
    for c in 0..w {
        values[22 * w + c] = 0.9;
        values[35 * w + c] = 0.6;
    }
    for r in 0..h {
        values[r * w + 30] = 0.8;
    }
    for v in values.iter_mut() {
        if *v == 0.0 && rng.random::<f64>() < 0.1 {
            *v = (rng.random::<f64>() * 0.3 * 1000.0).round() / 1000.0;
        }
    }
    json!({ "format_version": 1, "width": w, "height": h, "values": values }).to_string()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}
