use multitrain::config::RunConfig;
use multitrain::data::Suite;

const REACH: isize = 3;

/// Frame-to-frame cross-correlation over displacements in `[-REACH, REACH]²`,
/// averaged over time, after removing each frame's mean (the background
/// level) and normalizing to unit length.
fn motion_signature(suite: &Suite, k: usize, sample: usize) -> Vec<f64> {
    let clip = suite.clip::<f64>(k, sample).unwrap();
    let [t, h, w, _] = suite.clip_shape;
    let frames: Vec<Vec<f64>> = (0..t)
        .map(|f| {
            let fr = &clip.tensor.data()[f * h * w..(f + 1) * h * w];
            let mu = fr.iter().sum::<f64>() / fr.len() as f64;
            fr.iter().map(|v| v - mu).collect()
        })
        .collect();
    let side = (2 * REACH + 1) as usize;
    let mut sig = vec![0.0; side * side];
    for f in 0..t - 1 {
        for dy in -REACH..=REACH {
            for dx in -REACH..=REACH {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let y2 = (y as isize + dy).rem_euclid(h as isize) as usize;
                        let x2 = (x as isize + dx).rem_euclid(w as isize) as usize;
                        acc += frames[f][y * w + x] * frames[f + 1][y2 * w + x2];
                    }
                }
                sig[((dy + REACH) as usize) * side + (dx + REACH) as usize] += acc;
            }
        }
    }
    let norm = sig.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    sig.iter().map(|v| v / norm).collect()
}

fn class_signature(suite: &Suite, k: usize, class: usize, samples: usize) -> Vec<f64> {
    let classes = suite.registry.get(k).unwrap().classes();
    let mut acc = vec![0.0; ((2 * REACH + 1) * (2 * REACH + 1)) as usize];
    for i in 0..samples {
        let s = motion_signature(suite, k, class + i * classes);
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    acc
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn concept_sharing_classes_correlate_more() {
    let cfg = RunConfig::parse("", &["datasets.train=[200,200,200]".into()]).unwrap();
    let suite = cfg.suite().unwrap();
    let samples = 50;
    let sigs: Vec<Vec<Vec<f64>>> = suite
        .registry
        .iter()
        .map(|d| {
            (0..d.classes())
                .map(|c| class_signature(&suite, d.id, c, samples))
                .collect()
        })
        .collect();
    let (mut share, mut other) = (Vec::new(), Vec::new());
    for a in suite.registry.iter() {
        for b in suite.registry.iter().filter(|b| b.id > a.id) {
            for (ca, sa) in a.class_concepts.iter().enumerate() {
                for (cb, sb) in b.class_concepts.iter().enumerate() {
                    let r = correlation(&sigs[a.id][ca], &sigs[b.id][cb]);
                    if sa.iter().any(|g| sb.contains(g)) {
                        share.push(r);
                    } else {
                        other.push(r);
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let worst_share = share.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(!share.is_empty() && !other.is_empty());
    assert!(mean(&share) > mean(&other), "{share:?} vs {other:?}");
    assert!(worst_share > mean(&other), "{share:?} vs {other:?}");
}
