//! Generates the default synthetic dataset and trains a model on it,
//! printing one line per epoch.
//!
//! cargo run --release -p klite-core --example synth_run -- [a|b] [epochs] [lr]

use klite::kgstore::build_index;
use klite::models::{ModelConfig, Variant};
use klite::pipeline::{train, KnowledgeContext, TrainConfig};
use klite::synthvqa::{build_synthetic_kg, build_tables, generate_dataset, GenConfig, COLORS, OBJECT_CLASSES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(Variant::B);
    let epochs: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let lr: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(1e-3);

    let gen = GenConfig::default();
    let tables = build_tables(gen.seed);
    let data = generate_dataset(&gen, &tables.labels)?;
    let ctx = KnowledgeContext::new(build_index(build_synthetic_kg(&OBJECT_CLASSES, &COLORS)), tables);
    let preset = match variant {
        Variant::A => "model-a-synth",
        Variant::B => "model-b-synth",
    };
    let model = ModelConfig::preset(preset).expect("shipped preset");
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        ..TrainConfig::new(0)
    };
    let out = train(&model, &data, &ctx, &cfg, |r| {
        println!(
            "epoch {:>2}  loss {:.4}  train {:.4}  val {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy, r.wall_time
        )
    })?;
    println!("best val {:.4} at epoch {}", out.summary.best_val_accuracy, out.summary.best_epoch);
    Ok(())
}
