//! Regenerates the bundled fixtures under `fixtures/`:
//!
//! ```text
//! cargo run --release --example make_fixtures -- [synth] [synth_small] [kitti_mini]
//! ```
//!
//! With no arguments all three are written.

use std::path::PathBuf;

use wavesplat::ingest::kitti::{write_kitti_sequence, KittiExport};
use wavesplat::ingest::{synth_scene_generate, write_synth, SynthSpec};

fn main() -> wavesplat::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let mut which: Vec<String> = std::env::args().skip(1).collect();
    if which.is_empty() {
        which = vec!["synth".into(), "synth_small".into(), "kitti_mini".into()];
    }
    for name in which {
        let dir = root.join(&name);
        match name.as_str() {
            "synth" => {
                write_synth(&dir, &SynthSpec::fixture())?;
            }
            "synth_small" => {
                write_synth(&dir, &SynthSpec::small())?;
            }
            "kitti_mini" => {
                // Level camera so label boxes stay upright in the camera frame.
                let spec = SynthSpec {
                    camera_pitch: 0.0,
                    ..SynthSpec::small()
                };
                let out = synth_scene_generate(&spec)?;
                write_kitti_sequence(&dir, &out.manifest, &out.images, &out.clouds, &KittiExport::default())?;
                let labels = dir.join("label_02.txt");
                let mut text = std::fs::read_to_string(&labels).expect("labels were just written");
                text.push_str("2 -1 DontCare -1 -1 -10.000000 30.00 20.00 40.00 30.00 -1000 -1000 -1000 -10 -1 -1 -10\n");
                std::fs::write(&labels, text).expect("fixture directory is writable");
                let spec_json = serde_json::to_string_pretty(&spec).expect("spec serializes");
                std::fs::write(dir.join("synth_spec.json"), spec_json).expect("fixture directory is writable");
            }
            other => {
                eprintln!("unknown fixture '{other}'");
                std::process::exit(2);
            }
        }
        println!("wrote {}", dir.display());
    }
    Ok(())
}
