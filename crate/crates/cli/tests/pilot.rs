//! Manual pilot drivers (ignored by default).

use muwarm::experiments::{grid_search, ExperimentSpec, Workspace};
use muwarm_core::param::{AttnScaling, Scheme, SchemeKind};

#[test]
#[ignore]
fn pilot_direct_grids_at_width_128() {
    let spec = ExperimentSpec {
        out_dir: "/tmp/pilot_grid128".into(),
        grid_tokens_per_param: Some(1.5),
        ..ExperimentSpec::default()
    };
    let ws = Workspace::new(&spec.out_dir, spec.corpus().unwrap()).unwrap();
    let mup = spec.scheme;
    let sp = Scheme {
        name: SchemeKind::Sp,
        attn_scaling: AttnScaling::OneOverSqrtD,
        ..spec.scheme
    };
    for (name, scheme) in [("muP", mup), ("SP", sp)] {
        let g = grid_search(&spec, &ws, &scheme, 128).unwrap();
        println!("=== {name} direct grid at width 128");
        for c in &g.cells {
            println!(
                "lr={:<12} mean={:.4} per-seed={:?}",
                c.lr,
                c.mean_loss,
                c.per_seed_loss
                    .iter()
                    .map(|v| (v * 1e4).round() / 1e4)
                    .collect::<Vec<_>>()
            );
        }
        println!("argmin lr {}", g.argmin_lr);
    }
}
