mod common;

use ndarray::{Axis, Zip};

use common::{fixture_cohort, fixture_config};
use ctrscan::align::{train_alignment, PairedView};
use ctrscan::fusion::{class_kl, EmbeddedView};
use ctrscan::pipeline::{embed_all, prepare_all, train_all, Stage};
use ctrscan::prepare::GenePanel;
use ctrscan::rng::seeded;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn alignment_separates_matched_pairs_across_temperatures() {
    let cohort = fixture_cohort(0);
    let sources = &cohort[..4];
    let base = fixture_config(0);
    let refs: Vec<_> = sources.iter().collect();
    let panel = GenePanel::fit(&refs, base.hvg_mode, base.target_sum, base.n_hvg).unwrap();
    let prepared = prepare_all(sources, &panel, &base).unwrap();
    // every fifth spot held out
    let split = |n: usize, held: bool| -> Vec<usize> { (0..n).filter(|i| (i % 5 == 0) == held).collect() };
    let train: Vec<_> = prepared
        .iter()
        .map(|p| {
            let idx = split(p.n_spots(), false);
            (p.image.select(Axis(0), &idx), p.gene.select(Axis(0), &idx))
        })
        .collect();
    let views: Vec<PairedView> = train.iter().map(|(i, g)| PairedView { image: i, gene: g }).collect();

    for tau in [0.05, 0.07, 0.1] {
        let mut cfg = base.align.clone();
        cfg.tau = tau;
        let (model, trace) = train_alignment(&views, &cfg, &mut seeded(1)).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        let mut matched = Vec::new();
        let mut mismatched = Vec::new();
        for p in &prepared {
            let idx = split(p.n_spots(), true);
            let (hi, hg) = model
                .embed(&p.image.select(Axis(0), &idx), &p.gene.select(Axis(0), &idx))
                .unwrap();
            let cos = hi.dot(&hg.t());
            for ((i, j), &c) in cos.indexed_iter() {
                if i == j {
                    matched.push(c);
                } else {
                    mismatched.push(c);
                }
            }
        }
        let gap = mean(&matched) - mean(&mismatched);
        assert!(gap >= 0.2, "tau {tau}: gap {gap}");
    }
}

#[test]
fn full_training_lowers_losses_and_separates_classes_in_latent_space() {
    let cohort = fixture_cohort(1);
    let sources = &cohort[..4];
    let cfg = fixture_config(1);
    let (model, log) = train_all(sources, &cfg).unwrap();
    for stage in [Stage::Align, Stage::Fuse, Stage::Cls] {
        let losses: Vec<f64> = log.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect();
        assert!(losses.last().unwrap() < &losses[0], "{stage:?}: {losses:?}");
    }

    let prepared = prepare_all(sources, &model.panel, &cfg).unwrap();
    let emb = embed_all(&model.align, &prepared).unwrap();
    let centers = model.vrbca.class_centers();
    let latent = cfg.vrbca.latent_dim;
    let mut sums = [vec![0.0; latent], vec![0.0; latent]];
    let mut counts = [0usize; 2];
    let mut own = Vec::new();
    let mut other = Vec::new();
    let mut mus: Vec<(u8, Vec<f64>)> = Vec::new();
    for (p, (hi, hg)) in prepared.iter().zip(&emb) {
        let labels = p.labels.as_ref().unwrap();
        let view = EmbeddedView {
            h_img: hi,
            h_gene: hg,
            neighbors: &p.neighbors,
            labels: Some(labels),
        };
        let (_, mu, logvar) = model.vrbca.embed(&view).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let m = mu.row(i).to_vec();
            let lv = logvar.row(i).to_vec();
            let c = y as usize;
            own.push(class_kl(&m, &lv, centers.row(c).as_slice().unwrap()));
            other.push(class_kl(&m, &lv, centers.row(1 - c).as_slice().unwrap()));
            Zip::from(&mut sums[c][..]).and(&m[..]).for_each(|s, &v| *s += v);
            counts[c] += 1;
            mus.push((y, m));
        }
    }
    assert!(mean(&own) < mean(&other), "own {} other {}", mean(&own), mean(&other));

    let means: Vec<Vec<f64>> = (0..2)
        .map(|c| sums[c].iter().map(|s| s / counts[c] as f64).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let spread = mean(&mus.iter().map(|(y, m)| dist(m, &means[*y as usize])).collect::<Vec<_>>());
    let gap = dist(&means[0], &means[1]);
    assert!(gap > 0.1 * spread, "gap {gap} spread {spread}");
}
