use approx::assert_relative_eq;
use ndarray::Array2;

use super::*;
use crate::detect::Cluster;
use crate::geometry::PolarPoint;
use crate::preprocess::RadarFrame;

fn geom() -> FrameGeometry {
    FrameGeometry { n_range: 64, n_azimuth: 64, range_res: 15.0, azimuth_res: 0.005, range_offset: 2500.0, azimuth_offset: -0.16 }
}

fn component_at(range: f64, azimuth: f64, r: f64) -> TbdComponent {
    let (px, py) = crate::geometry::polar_to_cartesian(range, azimuth);
    TbdComponent {
        density: StateDensity::new(Vector4::new(px, 0.0, py, 0.0), Matrix4::from_diagonal(&Vector4::new(900.0, 25.0, 900.0, 25.0))),
        r,
        alpha: 20.0,
        beta: 1.0,
        gamma_ne: 500.0,
        lambda_hat: 0.0,
        label: 7,
        confirmed: false,
        birth_time: 0,
        prior_a: 20.0,
        prior_b: 1.0,
    }
}

#[test]
fn predict_existence_and_forgetting() {
    let c = component_at(3000.0, 0.0, 0.6);
    let model = MotionModel::new(2.5, 0.01, 0.95).unwrap();
    let out = tbd_predict(std::slice::from_ref(&c), &model, &TbdConfig::default()).unwrap();
    assert_relative_eq!(out[0].r, 0.57, epsilon = 1e-15);
    assert_relative_eq!(out[0].alpha / out[0].beta, 20.0, max_relative = 1e-15);
    assert!(out[0].beta < 1.0);
    let same = tbd_predict(&[c], &model, &TbdConfig { forgetting: 1.0, ..Default::default() }).unwrap();
    assert_eq!((same[0].alpha, same[0].beta), (20.0, 1.0));
}

#[test]
fn merge_endpoints_exact() {
    assert_eq!(merge_existence_prior(1.0, 20.0, 1.0, 500.0).unwrap(), (20.0, 1.0));
    assert_eq!(merge_existence_prior(0.0, 20.0, 1.0, 500.0).unwrap(), (1.0, 500.0));
}

/// Mixture moments by quadrature in log-space, independent of digamma.
fn mixture_moments(r: f64, alpha: f64, beta: f64, gamma: f64) -> (f64, f64) {
    let pdf = |l: f64| r * crate::special::gamma_ln_pdf(l, alpha, beta).exp() + (1.0 - r) * gamma * (-gamma * l).exp();
    // substitute l = exp(u); integrate over u with Simpson
    let (lo, hi, n) = (-40.0f64, 6.0f64, 400_000usize);
    let h = (hi - lo) / n as f64;
    let (mut m1, mut ml) = (0.0, 0.0);
    for k in 0..=n {
        let u = lo + k as f64 * h;
        let l = u.exp();
        let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        let dens = pdf(l) * l;
        m1 += w * dens * l;
        ml += w * dens * u;
    }
    (m1 * h / 3.0, ml * h / 3.0)
}

#[test]
fn merge_matches_grid_kld_minimiser() {
    let (a, b) = merge_existence_prior(0.5, 20.0, 1.0, 500.0).unwrap();
    let (m1, ml) = mixture_moments(0.5, 20.0, 1.0, 500.0);
    // minimising KL(p || Gamma(a,b)) = maximising E_p[ln Gamma(lambda; a, b)]
    let score = |a: f64, b: f64| a * b.ln() - crate::special::ln_gamma(a) + (a - 1.0) * ml - b * m1;
    let (mut ga, mut gb) = (1.0f64, 1.0f64);
    let (mut wa, mut wb) = (1000.0f64, 1000.0f64);
    while wa > 1e-5 {
        let mut best = (f64::NEG_INFINITY, ga, gb);
        for i in 0..=40 {
            for j in 0..=40 {
                let ca = ga * (wa.ln() * (i as f64 / 20.0 - 1.0)).exp();
                let cb = gb * (wb.ln() * (j as f64 / 20.0 - 1.0)).exp();
                let s = score(ca, cb);
                if s > best.0 {
                    best = (s, ca, cb);
                }
            }
        }
        ga = best.1;
        gb = best.2;
        wa = wa.sqrt();
        wb = wb.sqrt();
        if wa < 1.0 + 1e-5 {
            break;
        }
    }
    assert_relative_eq!(a, ga, max_relative = 1e-3);
    assert_relative_eq!(b, gb, max_relative = 1e-3);
}

#[test]
fn rate_update_examples() {
    assert_eq!(rate_map_update(20.0, 1.0, 10.0), (30.0, 2.0, 14.5));
    assert_eq!(rate_map_update(20.0, 1.0, 0.0), (20.0, 2.0, 9.5));
    let (a, _, l) = rate_map_update(0.5, 1.0, 0.2);
    assert!(a < 1.0);
    assert_eq!(l, 0.0);
}

#[test]
fn existence_examples() {
    // ln G(14.5; 20, 1) is about -3.6 while ln E(14.5; 500) = ln 500 - 7250
    let r = existence_update(14.5, 20.0, 1.0, 500.0, 0.5);
    assert!((r - 1.0).abs() < 1e-12);
    assert!(existence_update(1e-12, 20.0, 1.0, 500.0, 0.5) < 1e-100);
    assert_eq!(existence_update(3.0, 20.0, 1.0, 500.0, 1.0), 1.0);
    let mut prev = 0.0;
    for k in 1..100 {
        let r = existence_update(0.1, 20.0, 1.0, 500.0, k as f64 / 100.0);
        assert!(r >= prev && (0.0..=1.0).contains(&r));
        prev = r;
    }
}

#[test]
fn cell_mass_concentrated() {
    let g = geom();
    let centre = PolarPoint { range: g.range_center(10), azimuth: g.azimuth_center(20) };
    let mm = MeasurementModel { sigma_r: 0.5, sigma_theta: 1e-4 };
    let m = cell_mass_at(&centre, &g, &mm, 6.0);
    assert!(m.get((10, 20)) > 0.999);
    assert!(m.get((11, 20)) < 1e-6);
}

#[test]
fn cell_mass_boundary_symmetry() {
    let g = geom();
    let centre = PolarPoint { range: g.range_edge(30), azimuth: g.azimuth_center(32) };
    let m = cell_mass_at(&centre, &g, &MeasurementModel::default(), 6.0);
    assert!((m.get((29, 32)) - m.get((30, 32))).abs() < 1e-9);
}

#[test]
fn cell_mass_matches_quadrature() {
    let g = FrameGeometry { n_range: 128, n_azimuth: 128, range_res: 15.0, azimuth_res: 0.005, range_offset: 2000.0, azimuth_offset: -0.32 };
    let mm = MeasurementModel::default();
    let centre = PolarPoint { range: 2960.0, azimuth: 0.013 };
    let m = cell_mass_at(&centre, &g, &mm, 6.0);
    // midpoint rule on a fine grid over the gate box, summed cell by cell
    let sub = 40;
    let mut quad = 0.0;
    for i in m.rows.clone() {
        for &j in &m.cols {
            let mut cell = 0.0;
            for a in 0..sub {
                for b in 0..sub {
                    let r = g.range_edge(i) + (a as f64 + 0.5) * g.range_res / sub as f64;
                    let t = g.azimuth_edge(j) + (b as f64 + 0.5) * g.azimuth_res / sub as f64;
                    let dr = (r - centre.range) / mm.sigma_r;
                    let dt = (t - centre.azimuth) / mm.sigma_theta;
                    cell += (-0.5 * (dr * dr + dt * dt)).exp();
                }
            }
            quad += cell * (g.range_res / sub as f64) * (g.azimuth_res / sub as f64);
        }
    }
    quad /= 2.0 * std::f64::consts::PI * mm.sigma_r * mm.sigma_theta;
    assert!((m.total() - quad).abs() < 1e-6, "{} vs {}", m.total(), quad);
}

fn clutter_uniform(shape: (usize, usize), lambda0: f64) -> ClutterModel {
    let n = (shape.0 * shape.1) as f64;
    ClutterModel { lambda0, cell_density: Array2::from_elem(shape, 1.0 / n) }
}

fn frame_with(data: Array2<f64>) -> RadarFrame {
    let (nr, na) = data.dim();
    RadarFrame::new(data, FrameGeometry { n_range: nr, n_azimuth: na, ..geom() }, 0).unwrap()
}

#[test]
fn single_component_takes_all_gated_mass() {
    let f = frame_with(Array2::from_shape_fn((64, 64), |(i, j)| ((i * 7 + j * 3) % 5) as f64));
    let mm = MeasurementModel::default();
    let c = component_at(f.geometry.range_center(30), f.geometry.azimuth_center(30), 0.5);
    let m = cell_mass(&c, &f.geometry, &mm, 6.0);
    let counts = expected_counts(&f, std::slice::from_ref(&m), &[5.0], &clutter_uniform((64, 64), 0.0)).unwrap();
    let gated: f64 = m.rows.clone().flat_map(|i| m.cols.iter().map(move |&j| (i, j))).map(|c| f.intensities[c]).sum();
    assert_relative_eq!(counts.n_bar[0], gated, max_relative = 1e-12);
}

#[test]
fn identical_components_split_evenly() {
    let f = frame_with(Array2::from_elem((64, 64), 2.0));
    let mm = MeasurementModel::default();
    let c = component_at(f.geometry.range_center(30), f.geometry.azimuth_center(30), 0.5);
    let m = cell_mass(&c, &f.geometry, &mm, 6.0);
    let counts = expected_counts(&f, &[m.clone(), m], &[5.0, 5.0], &clutter_uniform((64, 64), 10.0)).unwrap();
    assert_relative_eq!(counts.n_bar[0], counts.n_bar[1], max_relative = 1e-14);
    let total = counts.n_bar[0] + counts.n_bar[1] + counts.n_clutter;
    assert_relative_eq!(total, counts.support_intensity, max_relative = 1e-12);
}

fn toy_mass(rows: std::ops::Range<usize>, cols: Vec<usize>, mass_r: Vec<f64>, mass_a: Vec<f64>) -> CellMass {
    let mean_r = rows.clone().map(|i| geom().range_center(i)).collect();
    let mean_a = cols.iter().map(|&j| geom().azimuth_center(j)).collect();
    CellMass { rows, cols, mass_r, mean_r, mass_a, mean_a }
}

#[test]
fn three_cell_hand_arithmetic() {
    // cells (0,0), (0,1), (0,2); z = 4, 2, 1
    let mut z = Array2::zeros((1, 3));
    z[(0, 0)] = 4.0;
    z[(0, 1)] = 2.0;
    z[(0, 2)] = 1.0;
    let f = RadarFrame::new(z, FrameGeometry { n_range: 1, n_azimuth: 3, ..geom() }, 0).unwrap();
    let a = toy_mass(0..1, vec![0, 1], vec![1.0], vec![0.5, 0.25]);
    let b = toy_mass(0..1, vec![1, 2], vec![1.0], vec![0.4, 0.2]);
    let clutter = ClutterModel { lambda0: 3.0, cell_density: Array2::from_elem((1, 3), 1.0 / 3.0) };
    let counts = expected_counts(&f, &[a, b], &[2.0, 5.0], &clutter).unwrap();
    // nu = [1 + 1, 1 + 0.5 + 2, 1 + 1] = [2, 3.5, 2]
    let n_a = 4.0 * 1.0 / 2.0 + 2.0 * 0.5 / 3.5;
    let n_b = 2.0 * 2.0 / 3.5 + 1.0 * 1.0 / 2.0;
    let n_c = 4.0 / 2.0 + 2.0 / 3.5 + 1.0 / 2.0;
    assert!((counts.n_bar[0] - n_a).abs() < 1e-12);
    assert!((counts.n_bar[1] - n_b).abs() < 1e-12);
    assert!((counts.n_clutter - n_c).abs() < 1e-12);
    assert!((counts.support_intensity - 7.0).abs() < 1e-12);
}

#[test]
fn synthetic_measurement_examples() {
    let g = geom();
    let mm = MeasurementModel::default();
    let mut z = Array2::zeros((64, 64));
    z[(20, 30)] = 5.0;
    let f = RadarFrame::new(z, g, 0).unwrap();
    let centre = PolarPoint { range: g.range_center(20), azimuth: g.azimuth_center(30) };
    let m = cell_mass_at(&centre, &g, &mm, 6.0);
    let nu = Array2::from_elem((64, 64), 1.0);
    let (zt, rt, n) = synthetic_measurement(&f, &m, 3.0, &nu, &mm).unwrap();
    let ci = m.cols.iter().position(|&j| j == 30).unwrap();
    assert!((zt.range - m.mean_r[20 - m.rows.start]).abs() < 1e-9);
    assert!((zt.azimuth - m.mean_a[ci]).abs() < 1e-12);
    assert!((zt.range - centre.range).abs() < 1e-6 && (zt.azimuth - centre.azimuth).abs() < 1e-9);

    let f2 = RadarFrame::new(&f.intensities * 2.0, g, 0).unwrap();
    let (zt2, rt2, n2) = synthetic_measurement(&f2, &m, 3.0, &nu, &mm).unwrap();
    assert!((zt2.range - zt.range).abs() < 1e-9 && (zt2.azimuth - zt.azimuth).abs() < 1e-15);
    assert!((rt2 * 2.0 - rt).norm() < 1e-12 * rt.norm());
    assert!((n2 - 2.0 * n).abs() < 1e-12);
}

#[test]
fn synthetic_measurement_two_cells() {
    let mut z = Array2::zeros((1, 2));
    z[(0, 0)] = 3.0;
    z[(0, 1)] = 1.0;
    let g = FrameGeometry { n_range: 1, n_azimuth: 2, ..geom() };
    let f = RadarFrame::new(z, g, 0).unwrap();
    let m = CellMass { rows: 0..1, cols: vec![0, 1], mass_r: vec![1.0], mean_r: vec![2510.0], mass_a: vec![0.6, 0.3], mean_a: vec![0.1, 0.2] };
    let nu = Array2::from_shape_vec((1, 2), vec![2.0, 1.5]).unwrap();
    let (zt, rt, n) = synthetic_measurement(&f, &m, 2.0, &nu, &MeasurementModel::default()).unwrap();
    let w0 = 3.0 * 2.0 * 0.6 / 2.0;
    let w1 = 1.0 * 2.0 * 0.3 / 1.5;
    assert!((n - (w0 + w1)).abs() < 1e-12);
    assert!((zt.azimuth - (w0 * 0.1 + w1 * 0.2) / (w0 + w1)).abs() < 1e-12);
    assert!((zt.range - 2510.0).abs() < 1e-12);
    assert!((rt - MeasurementModel::default().covariance() / (w0 + w1)).norm() < 1e-12);
}

#[test]
fn zero_frame_rates_and_coasting() {
    let f = frame_with(Array2::zeros((64, 64)));
    let mm = MeasurementModel::default();
    let c = component_at(f.geometry.range_center(30), f.geometry.azimuth_center(30), 0.5);
    let mut clutter = ClutterModel::from_profile(&f, None, &ClutterProfile::Uniform).unwrap();
    let (out, _) = em_update(std::slice::from_ref(&c), &f, &mut clutter, &mm, &TbdConfig::default()).unwrap();
    assert_relative_eq!(out[0].lambda_hat, (c.prior_a - 1.0) / (c.prior_b + 1.0), max_relative = 1e-14);
    assert_eq!(out[0].density, c.density);
}

#[test]
fn em_locks_onto_bright_target() {
    let g = FrameGeometry { n_range: 64, n_azimuth: 64, range_res: 15.0, azimuth_res: 0.005, range_offset: 2500.0, azimuth_offset: -0.16 };
    let mm = MeasurementModel::default();
    let truth = PolarPoint { range: g.range_center(32), azimuth: g.azimuth_center(30) };
    let spread = cell_mass_at(&truth, &g, &mm, 6.0);
    let data = Array2::from_shape_fn((64, 64), |c| 0.05 + 400.0 * spread.get(c));
    let f = RadarFrame::new(data, g, 0).unwrap();
    let mut c = component_at(g.range_center(34), g.azimuth_center(30), 0.5);
    let (a, b) = merge_existence_prior(0.5, 20.0, 1.0, 500.0).unwrap();
    c.prior_a = a;
    c.prior_b = b;
    let mut clutter = ClutterModel::from_profile(&f, None, &ClutterProfile::Uniform).unwrap();
    let cfg = TbdConfig { em_max_iters: 5, ..Default::default() };
    let (out, trace) = em_update(&[c], &f, &mut clutter, &mm, &cfg).unwrap();
    assert!(trace.iterations <= 5);
    let est = crate::geometry::position_to_polar(out[0].density.mean[0], out[0].density.mean[2]).unwrap();
    assert!((est.range - truth.range).abs() < g.range_res, "{est:?} vs {truth:?}");
    assert!((est.azimuth - truth.azimuth).abs() < g.azimuth_res);
    assert!(out[0].r > 0.5);
    for w in trace.objective.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
    }
}

fn cluster_at(range: f64, azimuth: f64) -> Cluster {
    Cluster { member_cells: vec![(0, 0)], centroid: PolarPoint { range, azimuth }, peak_score: 0.5, cell_count: 1, centroid_cell: (0, 0) }
}

#[test]
fn adaptive_birth_gating() {
    let g = geom();
    let mm = MeasurementModel::default();
    let cfg = TbdConfig::default();
    let mut label = 100;
    let near = cluster_at(3000.0, 0.0);
    let est = vec![(3050.0, 0.0)];
    assert!(adaptive_birth(std::slice::from_ref(&near), &est, &[], &g, &mm, &cfg, &mut label, 0).unwrap().is_empty());
    let far = vec![(3150.0, 0.0)];
    let born = adaptive_birth(&[near], &far, &[], &g, &mm, &cfg, &mut label, 0).unwrap();
    assert_eq!(born.len(), 1);
    assert_eq!(born[0].r, 1e-4);
    assert_eq!(born[0].label, 100);
    assert_eq!(label, 101);
    assert!(adaptive_birth(&[], &far, &[], &g, &mm, &cfg, &mut label, 0).unwrap().is_empty());
    // an existing component at the same spot suppresses a second birth
    let again = adaptive_birth(&[cluster_at(3000.0, 0.0)], &[], &born, &g, &mm, &cfg, &mut label, 1).unwrap();
    assert!(again.is_empty());
}

#[test]
fn management_rules() {
    let cfg = TbdConfig::default();
    let mut a = component_at(3000.0, 0.0, 0.6);
    a.label = 1;
    let mut b = component_at(3500.0, 0.0, 5e-4);
    b.label = 2;
    let (est, keep) = tbd_manage(&[a, b], &[], &cfg);
    assert_eq!(keep.len(), 1);
    assert!(keep[0].confirmed);
    assert_eq!(est.len(), 1);
    let mut dip = keep[0].clone();
    dip.r = 0.3;
    let (est, keep) = tbd_manage(&[dip], &[], &cfg);
    assert!(keep[0].confirmed);
    assert_eq!(est.len(), 1);
    let (_, keep) = tbd_manage(&keep, &[(3000.0, 10.0)], &cfg);
    assert!(keep.is_empty());
}

