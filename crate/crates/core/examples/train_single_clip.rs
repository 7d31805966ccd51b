//! Overfits the toy network to one synthetic clip and prints the loss on a
//! fixed evaluation set before and after.
//!
//! cargo run --release --example train_single_clip -- [steps] [hidden]

use std::time::Instant;

use flowrect::model::{Architecture, ToyFlowNet, ToyParams};
use flowrect::train::data::{SyntheticDataset, SyntheticDatasetSpec};
use flowrect::train::{evaluation_loss, train_with, TrainConfig, TrainEvent};

fn main() -> flowrect::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let hidden = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);

    let spec = SyntheticDatasetSpec::default();
    let dataset = SyntheticDataset::generate(&spec, 1, 0)?;
    let [l, c, h, w] = spec.video_shape();
    let arch = Architecture {
        hidden,
        ..Architecture::new(l, c, h, w)
    };
    let init = ToyParams::init(arch, 0)?;
    let before = evaluation_loss(&ToyFlowNet::new(init.clone()), &dataset, 64, 0)?;

    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train_with(init, &dataset, &cfg, |e| {
        if let TrainEvent::Step { step, loss } = e {
            if step % 250 == 0 {
                println!("step {step:>5}  loss {loss:.5}");
            }
        }
        Ok(())
    })?;
    let elapsed = start.elapsed();
    let after = evaluation_loss(&out.checkpoint.model(), &dataset, 64, 0)?;
    println!(
        "{} params, {steps} steps in {:.1}s; eval loss {before:.5} -> {after:.5} ({:.2}%)",
        arch.num_params(),
        elapsed.as_secs_f64(),
        100.0 * after / before
    );
    Ok(())
}
