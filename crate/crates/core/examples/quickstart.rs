//! Generate a few scenes, train briefly, and score the result.
//!
//!     cargo run --release --example quickstart -- 300

use ofnet::eval::EvalConfig;
use ofnet::model::{build_model, ModelVariant};
use ofnet::pipeline::evaluate_model;
use ofnet::synth::{generate_dataset, SceneSpec};
use ofnet::train::{train, TrainConfig};

fn main() -> ofnet::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = generate_dataset(&SceneSpec::default(), 8, 11, "demo_")?;
    let mut model = build_model::<f32>(&ModelVariant::tiny(), 1)?;
    println!("{} parameters", model.num_parameters());

    let cfg = TrainConfig { iterations, flip: false, ..TrainConfig::default() };
    train(&mut model, &data, &cfg, None, |r| {
        if r.step % 50 == 0 {
            println!("step {:>5}  loss {:.3}", r.step, r.total);
        }
    })?;

    let e = evaluate_model(&model, &data, &EvalConfig::default())?;
    println!("EPR ODS {:.3}  OIS {:.3}  AP {:.3}", e.epr.ods, e.epr.ois, e.epr.ap);
    println!("OPR ODS {:.3}  OIS {:.3}  AP {:.3}", e.opr.ods, e.opr.ois, e.opr.ap);
    Ok(())
}
