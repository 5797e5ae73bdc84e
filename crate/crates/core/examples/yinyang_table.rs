//! Runs the Yin-Yang presets and prints mean final validation accuracy.
//!
//! `cargo run --release --example yinyang_table [runs] [preset...]`

use std::time::Instant;

use deepbass::experiments::{preset, preset_names, run_experiment};

fn main() -> deepbass::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut names: Vec<String> = args.collect();
    if names.is_empty() {
        names = preset_names().into_iter().filter(|n| n.starts_with("yinyang")).map(String::from).collect();
    }
    let out = std::env::temp_dir().join("deepbass-yinyang-table");
    for name in names {
        let mut cfg = preset(&name)?;
        cfg.runs = runs;
        cfg.output_dir = out.clone();
        let t = Instant::now();
        let s = run_experiment(&cfg)?;
        let accs: Vec<String> = s.runs.iter().filter_map(|r| r.final_val_acc).map(|a| format!("{:.1}", 100.0 * a)).collect();
        println!(
            "{name:<26} mean {:6.2}  std {:5.2}  [{}]  {:.1}s",
            100.0 * s.mean.unwrap_or(f64::NAN),
            100.0 * s.std.unwrap_or(f64::NAN),
            accs.join(" "),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
