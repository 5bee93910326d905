//! A short throughput grid on low-entropy prompts.

use prefill_engine::bench::{bench_grid, BenchConfig};

fn main() -> prefill_engine::Result<()> {
    let mut cfg = BenchConfig::desk_default();
    cfg.lengths = vec![512, 1024, 2048];
    cfg.batches = vec![1, 2];
    let report = bench_grid(&cfg)?;
    print!("{}", report.render_table());
    Ok(())
}
