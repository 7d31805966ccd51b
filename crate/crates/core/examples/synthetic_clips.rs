//! Renders a few synthetic clips with their ground-truth flow and writes
//! them as PPM frames and PGM flow magnitudes.
//!
//! cargo run --release --example synthetic_clips -- [out_dir]

use std::path::PathBuf;

use flowrect::io::{export_frames, write_atomic};
use flowrect::optical_flow::magnitude_pgm;
use flowrect::train::data::{SyntheticDataset, SyntheticDatasetSpec};

fn main() -> flowrect::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("flowrect-clips"));
    let spec = SyntheticDatasetSpec {
        size: 32,
        radius: 5,
        ..SyntheticDatasetSpec::default()
    };
    let ds = SyntheticDataset::generate(&spec, 4, 0)?;
    for (i, clip) in ds.clips.iter().enumerate() {
        let dir = out.join(format!("clip_{i}"));
        let frames = export_frames(&clip.frames, &dir)?;
        if let Some(flow) = &clip.flow {
            for k in 0..flow.pairs() {
                write_atomic(&dir.join(format!("flow_{k:03}.pgm")), &magnitude_pgm(flow, k))?;
            }
        }
        let p = &clip.params;
        println!(
            "clip {i}: {:?} {:?} class {} velocity ({}, {}), {} frames in {}",
            p.motion,
            p.shape,
            p.class,
            p.vx,
            p.vy,
            frames.len(),
            dir.display()
        );
    }
    Ok(())
}
