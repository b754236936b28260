use std::fmt::Write;

use crate::error::Result;
use crate::metrics::{CostReport, Group};
use crate::model::ModelConfig;

/// Cost of `cfg` and of the same configuration with the other fusion
/// convolution kind, as `(full, lite)`.
pub fn cost_pair(cfg: &ModelConfig, h: usize, w: usize) -> Result<(CostReport, CostReport)> {
    let full = CostReport::new(&ModelConfig { lite: false, ..cfg.clone() }, h, w)?;
    let lite = CostReport::new(&ModelConfig { lite: true, ..cfg.clone() }, h, w)?;
    Ok((full, lite))
}

/// Side-by-side table followed by the machine-readable metric lines.
pub fn analyze_text(cfg: &ModelConfig, h: usize, w: usize) -> Result<String> {
    let (full, lite) = cost_pair(cfg, h, w)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} C={} N={} K={} at {h}x{w}",
        cfg.variant, cfg.channels, cfg.descriptors, cfg.classes
    );
    let _ = writeln!(
        s,
        "  {:<10} {:>12} {:>12} {:>16} {:>16}",
        "group", "params", "params_lite", "flops", "flops_lite"
    );
    let mut row = |name: &str, a: u64, b: u64, c: u64, d: u64| {
        let _ = writeln!(s, "  {name:<10} {a:>12} {b:>12} {c:>16} {d:>16}");
    };
    for g in Group::ALL {
        row(g.name(), full.params.get(g), lite.params.get(g), full.flops.get(g), lite.flops.get(g));
    }
    row("total", full.params.total(), lite.params.total(), full.flops.total(), lite.flops.total());
    let _ = writeln!(s, "  descriptor memory {} MB", full.descriptor_mem_mb);
    s.push_str(&full.kv_lines());
    s.push_str(&lite.kv_lines());
    Ok(s)
}
