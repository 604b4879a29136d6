use std::path::PathBuf;

use phs_core::{parse_config, HydroSystem, PriceModel};

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.price_model().unwrap();
            cfg.hydro_system().unwrap();
            n += 1;
        }
    }
    assert!(n >= 6);
}

#[test]
fn reference_configs_match_the_built_in_systems() {
    let load = |name: &str| parse_config(&config_dir().join(name)).unwrap();
    let u3 = load("gbm_u3.toml");
    assert_eq!(
        u3.hydro_system().unwrap(),
        HydroSystem::reference_single(3.0)
    );
    assert_eq!(u3.price_model().unwrap(), PriceModel::gbm(0.05, 0.1));
    let u2 = load("igbm_u2.toml");
    assert_eq!(u2.price_model().unwrap(), PriceModel::igbm(5.0, 1.0, 0.1));
    assert!(!u2.hydro_system().unwrap().check_h3(10_000).holds);
    let cascade = load("cascade_gbm.toml");
    assert_eq!(
        cascade.hydro_system().unwrap(),
        HydroSystem::reference_cascade()
    );
    assert_eq!(
        cascade
            .hjb_grid(&HydroSystem::reference_cascade())
            .unwrap()
            .shape(),
        vec![61, 61, 61]
    );
}
