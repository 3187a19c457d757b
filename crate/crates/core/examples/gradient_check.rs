//! Finite-difference gradient check of every trainable module on tiny
//! random 64-bit instances.

use multifusion::harness::{gradcheck_module, GRADCHECK_MODULES};

fn main() -> multifusion::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for m in GRADCHECK_MODULES {
        let t = std::time::Instant::now();
        let r = gradcheck_module(m, seed)?;
        println!(
            "{m:<12} {} worst {:.2e} at {} ({} elements, {:.1?})",
            if r.passed() { "pass" } else { "FAIL" },
            r.worst,
            r.param,
            r.elements,
            t.elapsed()
        );
    }
    Ok(())
}
