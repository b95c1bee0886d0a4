//! Runs every pipeline stage for the rotation system from
//! `configs/rotation.toml`, writing artifacts to a temporary directory, and
//! prints a map of the cells certified safe for the whole horizon.
//!
//! ```sh
//! cargo run --release --example rotation_pipeline
//! ```

use std::fs;
use std::path::Path;

use gpverify::config::RunConfig;
use gpverify::pipeline::{read_heatmap, run_stage, sha256_hex, Stage};

fn main() -> gpverify::Result<()> {
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/rotation.toml");
    let text = fs::read_to_string(&config_path)?;
    let out_dir = std::env::temp_dir().join("gpverify-rotation-example");
    let overrides = vec![format!("output.dir={:?}", out_dir.display().to_string())];
    let cfg = RunConfig::from_toml_str_with(&text, &overrides)?;

    for report in run_stage(&cfg, Stage::Pipeline, &sha256_hex(text.as_bytes()))? {
        println!("{:>9}: {}", report.stage, report.summary);
    }

    let heatmap = fs::File::open(cfg.heatmap_path())?;
    let (lower, upper) = read_heatmap(std::io::BufReader::new(heatmap))?;
    let grid = cfg.grid()?;
    let [nx, ny] = [grid.counts()[0], grid.counts()[1]];
    println!("\np_min per cell (# = 1, + >= 0.5, . < 0.5); x grows to the right, y upwards:");
    for row in (0..ny).rev() {
        let line: String = (0..nx)
            .map(|col| match lower[grid.flat_index(&[col, row])] {
                p if p == 1.0 => '#',
                p if p >= 0.5 => '+',
                _ => '.',
            })
            .collect();
        println!("  {line}");
    }
    let m = grid.num_cells();
    let loose = (0..m).filter(|&q| upper[q] - lower[q] > 0.5).count();
    println!("\n{loose} of {m} cells have a gap p_max - p_min above 0.5");
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
