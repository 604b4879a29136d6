use phs_core::config::parse_str;
use phs_core::{io, run_pipeline, PipelineOptions, Stage};

const SMALL_U2: &str = r#"
[price]
kind = "igbm"
a = 5.0
b = 1.0
sigma = 0.1

[system]
n_dams = 1
beta = { form = "sine", amplitude = 2.0, offset = 0.5 }
y_max = 1.0
u1_max = 2.0
T = 1.0

[grid]
x = { min = 0.0, max = 10.0, n_points = 11 }
y = { min = 0.0, max = 1.0, n_points = 21 }
n_z = 25
n_time_steps = 40

[solver]
n_controls = 9

[output]
export_times = [0.0, 0.3]
plot = false

[sim]
n_paths = 400
dt_sim = 0.005
record_paths = 3
"#;

#[test]
fn uncontrollable_config_runs_through_the_level_set_path() {
    let cfg = parse_str(SMALL_U2, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = PipelineOptions {
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let report = run_pipeline(
        &cfg,
        &[Stage::Viability, Stage::Simulate, Stage::Validate],
        &opts,
    )
    .unwrap();
    assert!(!report.stages_run.contains(&Stage::Hjb));
    assert!(report.stages_run.contains(&Stage::Reconstruct));

    // Near the inflow peak the top of the reservoir is not controllable.
    let rec = io::read_table(&dir.path().join("levelset/V_reconstructed_t12.csv")).unwrap();
    let flag = rec.column("infeasible").unwrap();
    let y = rec.column("y").unwrap();
    // The level-set grid extends past the reservoir, where every node is infeasible.
    let inside: Vec<(f64, f64)> = flag
        .iter()
        .zip(&y)
        .map(|(&f, &y)| (f, y))
        .filter(|&(_, y)| (0.0..=1.0 + 1e-9).contains(&y))
        .collect();
    assert!(inside.iter().any(|&(f, y)| f == 1.0 && y > 0.9));
    // Boundary near 0.85; this coarse grid smears it by up to three cells.
    assert!(inside.iter().all(|&(f, y)| f == 0.0 || y > 0.7 - 1e-9));
    assert!(flag
        .iter()
        .zip(&y)
        .all(|(&f, &y)| f == 1.0 || (0.0..=1.0 + 1e-9).contains(&y)));

    let region = io::read_table(&dir.path().join("viability/region.csv")).unwrap();
    let hat = region.column("hat_y_analytic").unwrap();
    let min = hat.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((min - 0.847).abs() < 0.01, "min hat_y {min}");

    let (sim, verdict) = report.sim.as_ref().unwrap();
    assert_eq!(sim.violation_frequency, 0.0);
    assert!(verdict.is_some());
    let paths = io::read_table(&dir.path().join("sim/paths_sample.csv")).unwrap();
    assert_eq!(paths.header[0], "path");

    let validation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("validation.json")).unwrap())
            .unwrap();
    let names: Vec<&str> = validation["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"levelset_monotone_in_z"));
    assert!(names.contains(&"viability_boundary_within_one_cell"));
}

#[test]
fn every_csv_has_a_header_and_reads_back() {
    let cfg = parse_str(&SMALL_U2.replace("u1_max = 2.0", "u1_max = 3.0"), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = PipelineOptions {
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    run_pipeline(&cfg, &Stage::ALL, &opts).unwrap();
    let mut seen = 0;
    for sub in ["viability", "hjb", "levelset", "sim"] {
        for entry in std::fs::read_dir(dir.path().join(sub)).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "csv") {
                let t = io::read_table(&path).unwrap();
                assert!(
                    !t.header.is_empty() && !t.rows.is_empty(),
                    "{}",
                    path.display()
                );
                assert!(t.rows.iter().all(|r| r.len() == t.header.len()));
                seen += 1;
            }
        }
    }
    assert!(seen >= 10, "{seen} csv files");
}
