//! Autodiff against central differences, module by module.
//!
//! cargo run --release --example gradient_check -- [module] [step]

use tauflow::gradcheck;

fn main() -> tauflow::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let module = args.next().filter(|m| m != "all");
    let step = args.next().and_then(|s| s.parse().ok()).unwrap_or(gradcheck::DEFAULT_STEP);
    for r in gradcheck::run(module.as_deref(), step)? {
        println!(
            "{:<10} {:>6} entries  max rel err {:.2e}  {}",
            r.module,
            r.checked,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
