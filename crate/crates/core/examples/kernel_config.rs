//! Loads a config file (or `$CROWD_KERNEL_CONFIG`, or the defaults) and
//! reports what it resolved to.

use std::path::PathBuf;

use crowd_kernel::config::KernelConfig;

fn main() {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let cfg = match KernelConfig::resolve(path.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("rejected: {e}");
            std::process::exit(1);
        }
    };
    let fx = cfg.load_fixtures().unwrap();
    println!("delta {}", cfg.delta);
    for class in &cfg.classifications {
        println!("  {class:<20} weights {:?}", cfg.weights_for(class).0);
    }
    println!("scheduler {:?}", cfg.scheduler);
    println!("{} lexicon entries, {} strategies", fx.lexicon.entries().len(), fx.strategies.len());
    println!("{} reason nodes, {} correction operations", fx.pcl.len(), fx.scol.ops().count());
    println!("vector schema: {} dims, hash {}", fx.schema.dims(), fx.schema.hash());

    let mut broken = cfg.clone();
    broken.delta = 0.0;
    println!("with delta = 0: {}", broken.validate().unwrap_err());
}
