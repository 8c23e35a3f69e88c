//! End-to-end checks of scenario runs, reports and conservation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdmefem::basis1d::{basis, BasisKind, BasisTag};
use sdmefem::config::parse_config;
use sdmefem::dynamics::{newmark_run, NewmarkCoeffs, NewtonSettings, NoLoad, SolverSettings};
use sdmefem::femcore::{FeModel, Integration};
use sdmefem::material::NeoHookean;
use sdmefem::meshdof::gen_box_mesh;
use sdmefem::scenario::{run_scenario, scenario_config, scenario_text, ReportBundle, SCENARIOS};

/// CSV text with every column whose header mentions seconds removed.
fn without_timings(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|h| !h.contains("seconds")).collect();
    let filter = |l: &str| -> String {
        l.split(',')
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(v, _)| v)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(filter(header))
        .chain(lines.map(filter))
        .collect::<Vec<_>>()
        .join("\n")
}

fn comparable(b: &ReportBundle) -> Vec<String> {
    let mut v = vec![
        without_timings(&b.summary_csv),
        without_timings(&b.solver_stats_csv),
        without_timings(&b.steps_csv),
    ];
    v.extend(b.convergence_csv.iter().cloned());
    v.extend(b.contact_pressure_csv.iter().cloned());
    v.extend(b.vtk.iter().map(|(_, t)| t.clone()));
    v
}

#[test]
fn repeated_runs_are_identical() {
    for name in ["traction-block", "bar-impact"] {
        let cfg = scenario_config(name, None, None).unwrap();
        let a = run_scenario(&cfg, None).unwrap();
        let b = run_scenario(&cfg, None).unwrap();
        assert_eq!(comparable(&a), comparable(&b), "{name}");
    }
}

#[test]
fn scenario_configs_round_trip() {
    for name in SCENARIOS {
        let cfg = parse_config(&scenario_text(name).unwrap()).unwrap();
        let again = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}

/// Structural validation of a legacy ASCII unstructured-grid file.
fn validate_vtk(text: &str) -> Result<(usize, usize), String> {
    let mut lines = text.lines();
    let mut next = || lines.next().ok_or("truncated file");
    if next()? != "# vtk DataFile Version 3.0" {
        return Err("bad header".into());
    }
    next()?;
    if next()? != "ASCII" || next()? != "DATASET UNSTRUCTURED_GRID" {
        return Err("not an ASCII unstructured grid".into());
    }
    let count = |line: &str, key: &str| -> Result<Vec<usize>, String> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(format!("expected {key}, got '{line}'"));
        }
        Ok(it.filter_map(|t| t.parse().ok()).collect())
    };
    let floats = |line: &str, n: usize| -> Result<(), String> {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().map_err(|_| format!("bad number in '{line}'"))).collect::<Result<_, _>>()?;
        if v.len() != n || v.iter().any(|x| !x.is_finite()) {
            return Err(format!("bad vector '{line}'"));
        }
        Ok(())
    };
    let np = count(next()?, "POINTS")?[0];
    for _ in 0..np {
        floats(next()?, 3)?;
    }
    let c = count(next()?, "CELLS")?;
    let (nc, size) = (c[0], c[1]);
    let mut seen = 0;
    let mut nverts = 0;
    for _ in 0..nc {
        let ids: Vec<usize> = next()?.split_whitespace().map(|t| t.parse().map_err(|_| "bad id".to_string())).collect::<Result<_, _>>()?;
        nverts = ids[0];
        if ids.len() != nverts + 1 || ids[1..].iter().any(|&i| i >= np) {
            return Err("bad cell".into());
        }
        seen += ids.len();
    }
    if seen != size {
        return Err(format!("CELLS size {size}, counted {seen}"));
    }
    let expected = if nverts == 8 { "12" } else { "9" };
    if count(next()?, "CELL_TYPES")?[0] != nc {
        return Err("CELL_TYPES count".into());
    }
    for _ in 0..nc {
        if next()? != expected {
            return Err("cell type".into());
        }
    }
    if count(next()?, "POINT_DATA")?[0] != np {
        return Err("POINT_DATA count".into());
    }
    if !next()?.starts_with("VECTORS ") {
        return Err("missing VECTORS".into());
    }
    for _ in 0..np {
        floats(next()?, 3)?;
    }
    Ok((np, nc))
}

#[test]
fn written_outputs_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_config("bar-impact", None, None).unwrap();
    let b = run_scenario(&cfg, Some(dir.path())).unwrap();
    assert!(!b.vtk.is_empty());
    let mut vtk_files = 0;
    for f in &b.files {
        let text = std::fs::read_to_string(f).unwrap();
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        if name.ends_with(".vtk") {
            let (np, nc) = validate_vtk(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            // Two elements, resolution 2: 27 points and 8 sub-cells each.
            assert_eq!((np, nc), (54, 16), "{name}");
            vtk_files += 1;
        } else {
            let mut rows = text.lines();
            let width = rows.next().unwrap().split(',').count();
            assert!(rows.all(|r| r.split(',').count() == width), "{name}");
        }
    }
    // Snapshots every 20 of 200 steps plus the initial state.
    assert_eq!(vtk_files, 11);
}

#[test]
fn free_body_conserves_momentum_and_energy() {
    let mesh = Arc::new(gen_box_mesh([2, 1, 1], [1.0, 0.5, 0.5], [0.0; 3]).unwrap());
    let b = Arc::new(basis(3, BasisKind::new(BasisTag::SdmeH)).unwrap());
    let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
    let model = FeModel::new(mesh, b, Integration::Consistent, mat, &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = model.num_free();
    let u0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
    let v0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let p0 = model.momentum(&v0);
    let newton = NewtonSettings {
        tol: 1e-12,
        ..NewtonSettings::default()
    };
    let coeffs = NewmarkCoeffs::trapezoidal(1e-3).unwrap();
    let r = newmark_run(&model, &NoLoad, u0, v0, &coeffs, 40, &newton, &SolverSettings::default(), None, 0).unwrap();
    let p1 = model.momentum(&r.state.v);
    let scale = p0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for d in 0..3 {
        assert!((p1[d] - p0[d]).abs() <= 1e-9 * scale, "component {d}: {} vs {}", p1[d], p0[d]);
    }
    let e: Vec<f64> = r.steps.iter().map(|s| s.kinetic + s.strain).collect();
    let (lo, hi) = e.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!((hi - lo) / hi < 1e-2, "energy range {lo} .. {hi}");
}
