use std::path::Path;
use std::process::{Command, Stdio};

use srcid::cli::commands::{INITIAL_FILE, MEASUREMENTS_FILE, REFERENCE_FILE, TRUTH_FILE};
use srcid::cli::config::GridConfig;
use srcid::cli::io::{read_json, read_scalar, write_scalar};
use srcid::cli::{
    cmd_generate, cmd_metrics, cmd_relax, cmd_shape, metrics, ProblemConfig, EXIT_CONFIG, EXIT_IO, EXIT_OK,
};
use srcid::fem::{MeasurementMask, ModelCoefficients};
use srcid::grid::{ScalarField, StructuredGrid};
use srcid::levelset::count_components;
use srcid::synth::{
    generate_measurements, indicator_levelset, reference_state, sensor_mask, InclusionGeometry, NoiseSpec, Primitive,
};
use srcid::Error;

fn coeffs() -> ModelCoefficients {
    ModelCoefficients::new(0.01, [1.0, 0.0]).unwrap()
}

/// Desk problem with the shape stage on 60x20 to keep tests quick.
fn small_config() -> ProblemConfig {
    let mut cfg = ProblemConfig::default();
    cfg.grid = GridConfig {
        shape_level: 1,
        ..GridConfig::default()
    };
    cfg.shape.max_iters = 20;
    cfg.output.vtk = false;
    cfg
}

#[test]
fn indicator_examples() {
    let g = StructuredGrid::new(3.0, 1.0, 30, 10).unwrap();
    let all = InclusionGeometry::new(vec![Primitive::Rect {
        x0: 0.0,
        x1: 3.0,
        y0: 0.0,
        y1: 1.0,
    }]);
    assert!(indicator_levelset(&all, &g).coeffs().iter().all(|&v| v == 0.5));
    assert_eq!(
        count_components(&indicator_levelset(&InclusionGeometry::two_inclusions(), &g)),
        2
    );
    let outside = InclusionGeometry::new(vec![Primitive::Circle {
        cx: 2.9,
        cy: 0.5,
        r: 0.2,
    }]);
    assert!(matches!(
        reference_state(&outside, &g, &coeffs()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn noise_is_seeded_and_scaled() {
    let g = StructuredGrid::new(3.0, 1.0, 300, 100).unwrap();
    assert!(g.num_nodes() >= 30000);
    let geom = InclusionGeometry::two_inclusions();
    let reference = reference_state(&geom, &g, &coeffs()).unwrap();
    let clean = generate_measurements(&geom, &g, &coeffs(), &NoiseSpec { seed: 9, level: 0.0 }).unwrap();
    assert_eq!(clean, reference);
    let spec = NoiseSpec { seed: 9, level: 0.05 };
    let a = generate_measurements(&geom, &g, &coeffs(), &spec).unwrap();
    let b = generate_measurements(&geom, &g, &coeffs(), &spec).unwrap();
    assert_eq!(a, b);
    let other = generate_measurements(&geom, &g, &coeffs(), &NoiseSpec { seed: 10, level: 0.05 }).unwrap();
    assert_ne!(a, other);
    let umax = reference.coeffs().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let eta: Vec<f64> = a.coeffs().iter().zip(reference.coeffs()).map(|(x, y)| x - y).collect();
    let mean = eta.iter().sum::<f64>() / eta.len() as f64;
    let sd = (eta.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eta.len() - 1) as f64).sqrt();
    let sigma = 0.05 * umax;
    assert!((sd - sigma).abs() <= 0.03 * sigma, "sd {sd:e}, expected {sigma:e}");
}

#[test]
fn sensor_snapping_stays_within_a_cell_ring() {
    for (nx, ny) in [(30, 10), (60, 20), (120, 40)] {
        let g = StructuredGrid::new(3.0, 1.0, nx, ny).unwrap();
        let layout = sensor_mask(6, 0.264, &g).unwrap();
        let side = (0.264_f64 * 3.0 / 36.0).sqrt();
        let h = g.hx().max(g.hy());
        let ring = 36.0 * ((side + 2.0 * h).powi(2) - side * side) / g.area();
        assert!(
            (layout.coverage - 0.264).abs() <= ring,
            "{nx}x{ny}: {}",
            layout.coverage
        );
        match &layout.mask {
            MeasurementMask::Patches { patches } => {
                for p in patches {
                    for v in [p.x0 / g.hx(), p.x1 / g.hx(), p.y0 / g.hy(), p.y1 / g.hy()] {
                        assert!((v - v.round()).abs() < 1e-9, "patch {p:?} is not cell aligned");
                    }
                }
            }
            MeasurementMask::Full => panic!("expected patches"),
        }
    }
    let g = StructuredGrid::new(3.0, 1.0, 30, 10).unwrap();
    assert!(sensor_mask(6, 1.5, &g).is_err());
    assert!(sensor_mask(0, 0.2, &g).is_err());
}

#[test]
fn generate_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    let cfg = small_config();
    let files = cmd_generate(&cfg, &out).unwrap();
    let truth = read_scalar(&files.truth).unwrap();
    assert_eq!(truth.grid().nx(), 60);
    assert_eq!(
        read_scalar(&files.measurements).unwrap(),
        read_scalar(&files.reference).unwrap()
    );
    let mask: MeasurementMask = read_json(&files.mask).unwrap();
    assert!(mask.is_full());

    let again = dir.path().join("again");
    cmd_generate(&cfg, &again).unwrap();
    for name in [TRUTH_FILE, REFERENCE_FILE, MEASUREMENTS_FILE] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(again.join(name)).unwrap()
        );
    }
}

#[test]
fn huge_tolerance_skips_the_shape_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    let relaxed = cmd_relax(&cfg, dir.path()).unwrap();
    assert!(relaxed.succeeded());
    cfg.shape.tol = 1e3;
    let record = cmd_shape(&cfg, dir.path(), None).unwrap();
    let shape = record.shape.as_ref().unwrap();
    assert_eq!(shape.iterations, 0);
    let phi0 = read_scalar(&dir.path().join(INITIAL_FILE)).unwrap();
    let phi = read_scalar(&dir.path().join(srcid::cli::commands::FINAL_FILE)).unwrap();
    assert_eq!(phi, phi0);
}

#[test]
fn mu_sweep_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for mu in [5e-3, 5e-2, 5e-1] {
        let mut cfg = small_config();
        cfg.relax.mu = mu;
        let record = cmd_relax(&cfg, &dir.path().join(format!("mu{mu}"))).unwrap();
        match &record.relax {
            Some(r) => counts.push((mu, r.initial_components, r.iterations)),
            None => println!("mu {mu}: {:?}", record.failure),
        }
    }
    for (mu, comps, iters) in &counts {
        println!("mu {mu:e}: phi0 has {comps} component(s) after {iters} Newton steps");
    }
    let monotone = counts.windows(2).all(|w| w[1].1 <= w[0].1);
    println!("component count non-increasing in mu: {monotone}");
}

#[test]
fn metrics_examples() {
    let g = StructuredGrid::new(4.0, 2.0, 4, 2).unwrap();
    let truth = ScalarField::from_fn(g.refined_times(3), |x, y| {
        let a = (0.5 - (x - 0.5).abs()).min(0.5 - (y - 0.5).abs());
        let b = (0.5 - (x - 3.5).abs()).min(0.5 - (y - 1.5).abs());
        a.max(b)
    });
    let fine = *truth.grid();
    assert_eq!(metrics(&truth, &truth).unwrap().iou, 1.0);
    let none = metrics(&ScalarField::constant(fine, -0.5), &truth).unwrap();
    assert_eq!(none.iou, 0.0);
    let one = ScalarField::from_fn(fine, |x, y| (0.5 - (x - 0.5).abs()).min(0.5 - (y - 0.5).abs()));
    let half = metrics(&one, &truth).unwrap();
    assert!((half.iou - 0.5).abs() < 1e-12, "{}", half.iou);
    assert_eq!((half.components, half.truth_components), (1, 2));
    assert!((half.symmetric_difference_area - 1.0).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.srcf"), dir.path().join("b.srcf"));
    write_scalar(&p, &one).unwrap();
    write_scalar(&q, &truth).unwrap();
    assert_eq!(cmd_metrics(&p, &q).unwrap(), half);
    let odd = StructuredGrid::new(4.0, 2.0, 5, 2).unwrap();
    write_scalar(&q, &ScalarField::zeros(odd)).unwrap();
    assert!(matches!(cmd_metrics(&p, &q), Err(Error::InvalidArgument(_))));
}

fn srcid(args: &[&str], cwd: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_srcid"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .env_remove(srcid::cli::OUTPUT_DIR_ENV)
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("bad.toml"), "[shape]\nalpha = 2.0\n").unwrap();
    std::fs::write(cwd.join("unknown.toml"), "flux = 1\n").unwrap();
    assert_eq!(srcid(&["config"], cwd), EXIT_OK);
    assert_eq!(srcid(&["generate", "-c", "bad.toml"], cwd), EXIT_CONFIG);
    assert_eq!(srcid(&["run", "-c", "unknown.toml"], cwd), EXIT_CONFIG);
    assert_eq!(srcid(&["relax", "-c", "missing.toml"], cwd), EXIT_IO);
    assert_eq!(srcid(&["metrics", "nope.srcf", "nope.srcf"], cwd), EXIT_IO);
    assert_eq!(srcid(&["generate", "-o", "gen", "--seed", "3"], cwd), EXIT_OK);
    for name in [TRUTH_FILE, REFERENCE_FILE, MEASUREMENTS_FILE] {
        assert!(cwd.join("gen").join(name).exists());
    }
    let status = Command::new(env!("CARGO_BIN_EXE_srcid"))
        .args(["generate"])
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .env(srcid::cli::OUTPUT_DIR_ENV, "from_env")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(cwd.join("from_env").join(TRUTH_FILE).exists());
    assert_eq!(
        srcid(&["metrics", "gen/truth.srcf", "from_env/truth.srcf"], cwd),
        EXIT_OK
    );
}
