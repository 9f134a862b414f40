//! Train the desk-scale model on synthetic pairs and print held-out recall.
//!
//! ```text
//! cargo run --release -p geocaps-core --example desk_run -- [epochs] [batch] [seed] [loss] [head]
//! ```
//!
//! `loss` is one of `soft_trihard`, `soft_triplet`, `margin_trihard`;
//! `head` is `caps` or `fc`.

use std::time::Instant;

use geocaps::data::{generate_synthetic_pairs, ChannelStats, SyntheticSpec};
use geocaps::eval::recall_curve;
use geocaps::model::{Head, Model, ModelConfig};
use geocaps::objective::{LossConfig, LossKind};
use geocaps::train::{TrainConfig, Trainer};
use geocaps::Branch;

fn main() -> geocaps::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let epochs: usize = arg(0, "50").parse().expect("epochs");
    let batch: usize = arg(1, "32").parse().expect("batch");
    let seed: u64 = arg(2, "0").parse().expect("seed");
    let kind: LossKind = serde_json::from_str(&format!("\"{}\"", arg(3, "soft_trihard"))).expect("loss kind");
    let head: Head = serde_json::from_str(&format!("\"{}\"", arg(4, "caps"))).expect("head");

    let data = generate_synthetic_pairs(&SyntheticSpec {
        n_locations: 640,
        seed,
        ..Default::default()
    })?;
    let (mut train, mut test) = data.split(512)?;
    let stats = ChannelStats::compute(&train);
    train.standardize(&stats);
    test.standardize(&stats);

    let model = Model::<f32>::new(&ModelConfig {
        head,
        seed,
        ..Default::default()
    })?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            batch_size: batch,
            epochs,
            seed,
            ..Default::default()
        },
        LossConfig {
            kind,
            ..Default::default()
        },
    )?;
    let start = Instant::now();
    for epoch in 1..=epochs {
        let m = trainer.train_epoch(&train)?;
        if epoch % 10 != 0 && epoch != epochs {
            println!("epoch {epoch:2} loss {:.4}", m.mean_loss);
            continue;
        }
        let g = trainer.model.embed_all(&test.images(Branch::Ground), Branch::Ground, 64)?;
        let s = trainer.model.embed_all(&test.images(Branch::Satellite), Branch::Satellite, 64)?;
        let r = recall_curve(&g.values, &s.values, &[1, 5], &[])?;
        println!(
            "epoch {epoch:2} loss {:.4} r@1 {:.3} r@5 {:.3} r@top1% {:.3} r@top10% {:.3} ({:.0}s)",
            m.mean_loss,
            r.recall(1),
            r.recall(5),
            r.recall_top_percent(1.0),
            r.recall_top_percent(10.0),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
