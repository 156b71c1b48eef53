//! Shared test oracles: a Newton-Raphson power flow in polar bus-injection
//! coordinates (independent of the branch-flow sweeps under test) and
//! random small-network generators.

#![allow(dead_code)]

use droopopt_core::droop::{eval_exact_droop, ExactDroopCurve};
use droopopt_core::grid::{Bases, Bus, IbdgSpec, Line, RadialNetwork};
use droopopt_core::powerflow::clip_capability;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};

/// Polar Newton-Raphson solve of the bus-injection equations with optional
/// exact droop curves evaluated inside the mismatch. Returns per-line-ending
/// bus voltage magnitudes and squared line currents on convergence.
pub fn newton_polar(
    net: &RadialNetwork,
    curves: &[ExactDroopCurve],
    avail: &[f64],
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = net.n_lines(); // unknown buses 1..=n
    let nb = net.n_buses();
    let droop_units = net.droop_units();
    assert_eq!(curves.len(), droop_units.len());

    // complex bus admittance matrix: series line elements plus shunt loads
    // (consumption v（g + jb) corresponds to admittance g - jb)
    let mut g_bus: DMatrix<f64> = DMatrix::zeros(nb, nb);
    let mut b_bus: DMatrix<f64> = DMatrix::zeros(nb, nb);
    for line in &net.lines {
        let z2 = line.z_sq();
        let (gy, by) = (line.r / z2, -line.x / z2);
        let (i, j) = (line.up, line.id);
        g_bus[(i, i)] += gy;
        g_bus[(j, j)] += gy;
        g_bus[(i, j)] -= gy;
        g_bus[(j, i)] -= gy;
        b_bus[(i, i)] += by;
        b_bus[(j, j)] += by;
        b_bus[(i, j)] -= by;
        b_bus[(j, i)] -= by;
    }
    for bus in &net.buses[1..] {
        g_bus[(bus.id, bus.id)] += bus.shunt_g;
        b_bus[(bus.id, bus.id)] -= bus.shunt_b;
    }

    // fixed injection part: negative load plus non-droop availability
    let mut p_fix = vec![0.0; nb];
    let mut q_fix = vec![0.0; nb];
    for bus in &net.buses[1..] {
        p_fix[bus.id] -= bus.load_p;
        q_fix[bus.id] -= bus.load_q;
    }
    for (u, unit) in net.ibdgs.iter().enumerate() {
        if !unit.dispatchable {
            p_fix[unit.bus] += avail[u];
        }
    }

    let v0 = net.v0.sqrt();
    let mut vm = vec![v0; nb];
    let mut th = vec![0.0f64; nb];

    for _iter in 0..200 {
        // droop injections and their voltage derivatives at this iterate
        let mut p_spec = p_fix.clone();
        let mut q_spec = q_fix.clone();
        let mut dp_dv = vec![0.0; nb];
        let mut dq_dv = vec![0.0; nb];
        for (k, &u) in droop_units.iter().enumerate() {
            let unit = &net.ibdgs[u];
            let v = vm[unit.bus];
            let (p_raw, q_raw) = eval_exact_droop(&curves[k], v, avail[u]);
            let (p, q) = clip_capability(unit, p_raw, q_raw);
            p_spec[unit.bus] += p;
            q_spec[unit.bus] += q;
            // derivatives are zero on clipped or idle branches
            if (p - p_raw).abs() < 1e-12 && v > curves[k].vref_p_star {
                dp_dv[unit.bus] -= curves[k].alpha_p_star;
            }
            if (q - q_raw).abs() < 1e-12 {
                dq_dv[unit.bus] -= curves[k].alpha_q_star;
            }
        }

        // injections at the iterate
        let mut p_cal = vec![0.0f64; nb];
        let mut q_cal = vec![0.0f64; nb];
        for i in 0..nb {
            for k in 0..nb {
                let (gik, bik) = (g_bus[(i, k)], b_bus[(i, k)]);
                if gik == 0.0 && bik == 0.0 {
                    continue;
                }
                let d = th[i] - th[k];
                p_cal[i] += vm[i] * vm[k] * (gik * d.cos() + bik * d.sin());
                q_cal[i] += vm[i] * vm[k] * (gik * d.sin() - bik * d.cos());
            }
        }

        let mut mismatch: DVector<f64> = DVector::zeros(2 * n);
        for i in 1..nb {
            mismatch[i - 1] = p_spec[i] - p_cal[i];
            mismatch[n + i - 1] = q_spec[i] - q_cal[i];
        }
        if mismatch.amax() < tol {
            let v_out = DVector::from_fn(n, |l, _| vm[l + 1]);
            let mut f_out = DVector::zeros(n);
            for (l, line) in net.lines.iter().enumerate() {
                let z2 = line.z_sq();
                let (i, j) = (line.up, line.id);
                // |I|^2 = |V_i - V_j|^2 / |z|^2
                let dre = vm[i] * th[i].cos() - vm[j] * th[j].cos();
                let dim = vm[i] * th[i].sin() - vm[j] * th[j].sin();
                f_out[l] = (dre * dre + dim * dim) / z2;
            }
            return Some((v_out, f_out));
        }

        // Jacobian in (theta, V) blocks
        let mut jac: DMatrix<f64> = DMatrix::zeros(2 * n, 2 * n);
        for i in 1..nb {
            for k in 1..nb {
                let (gik, bik) = (g_bus[(i, k)], b_bus[(i, k)]);
                let d = th[i] - th[k];
                let (ri, ci) = (i - 1, k - 1);
                if i == k {
                    jac[(ri, ci)] = -q_cal[i] - b_bus[(i, i)] * vm[i] * vm[i];
                    jac[(ri, n + ci)] = p_cal[i] / vm[i] + g_bus[(i, i)] * vm[i];
                    jac[(n + ri, ci)] = p_cal[i] - g_bus[(i, i)] * vm[i] * vm[i];
                    jac[(n + ri, n + ci)] = q_cal[i] / vm[i] - b_bus[(i, i)] * vm[i];
                    // droop feedback enters the mismatch derivative
                    jac[(ri, n + ci)] -= dp_dv[i];
                    jac[(n + ri, n + ci)] -= dq_dv[i];
                } else if gik != 0.0 || bik != 0.0 {
                    jac[(ri, ci)] = vm[i] * vm[k] * (gik * d.sin() - bik * d.cos());
                    jac[(ri, n + ci)] = vm[i] * (gik * d.cos() + bik * d.sin());
                    jac[(n + ri, ci)] = -vm[i] * vm[k] * (gik * d.cos() + bik * d.sin());
                    jac[(n + ri, n + ci)] = vm[i] * (gik * d.sin() - bik * d.cos());
                }
            }
        }
        let step = jac.lu().solve(&mismatch)?;
        for i in 1..nb {
            th[i] += step[i - 1];
            vm[i] += step[n + i - 1];
            if vm[i] <= 0.0 {
                return None;
            }
        }
    }
    None
}

fn bus(id: usize) -> Bus {
    Bus {
        id,
        load_p: 0.0,
        load_q: 0.0,
        shunt_g: 0.0,
        shunt_b: 0.0,
        v_min: 0.81,
        v_max: 1.1025,
        v_target: 1.0,
        v_threshold: 0.1,
    }
}

fn line(id: usize, up: usize, r: f64, x: f64) -> Line {
    Line {
        id,
        up,
        r,
        x,
        i_max: 25.0,
        p_max: 10.0,
        q_max: 10.0,
    }
}

/// Random network with at most three buses: a single line, a two-line star,
/// or a two-line chain, with random impedances, loads, and shunts.
pub fn random_small_net<R: Rng + RngExt>(rng: &mut R) -> RadialNetwork {
    let n_lines = if rng.random_bool(0.4) { 1 } else { 2 };
    let chain = n_lines == 2 && rng.random_bool(0.5);
    let mut buses = vec![bus(0)];
    let mut lines = Vec::new();
    for i in 1..=n_lines {
        let mut b = bus(i);
        b.load_p = rng.random_range(0.0..0.5);
        b.load_q = rng.random_range(0.0..0.25);
        b.shunt_g = rng.random_range(0.0..0.08);
        b.shunt_b = rng.random_range(0.0..0.08);
        buses.push(b);
        let up = if i == 2 && chain { 1 } else { 0 };
        lines.push(line(
            i,
            up,
            rng.random_range(0.002..0.06),
            rng.random_range(0.002..0.08),
        ));
    }
    RadialNetwork {
        buses,
        lines,
        ibdgs: vec![],
        v0: 1.0,
        bases: Bases {
            v_base_kv: 12.66,
            s_base_mva: 1.0,
        },
    }
}

/// Five-bus chain with two droop units, used against the Newton oracle.
pub fn five_bus_droop_chain() -> RadialNetwork {
    let mut buses: Vec<Bus> = (0..5).map(bus).collect();
    buses[1].load_p = 0.20;
    buses[1].load_q = 0.10;
    buses[2].load_p = 0.15;
    buses[2].load_q = 0.07;
    buses[3].load_p = 0.10;
    buses[3].load_q = 0.05;
    buses[4].load_p = 0.12;
    buses[4].load_q = 0.06;
    let lines = vec![
        line(1, 0, 0.010, 0.020),
        line(2, 1, 0.015, 0.025),
        line(3, 2, 0.012, 0.018),
        line(4, 3, 0.010, 0.015),
    ];
    let ibdgs = vec![
        IbdgSpec {
            bus: 3,
            dispatchable: true,
            p_max: 0.5,
            q_min: -0.3,
            q_max: 0.3,
            s_max: 0.6,
            mu_min: 0.85,
            availability: "pv1".into(),
        },
        IbdgSpec {
            bus: 4,
            dispatchable: true,
            p_max: 0.5,
            q_min: -0.3,
            q_max: 0.3,
            s_max: 0.6,
            mu_min: 0.85,
            availability: "pv2".into(),
        },
    ];
    RadialNetwork {
        buses,
        lines,
        ibdgs,
        v0: 1.0,
        bases: Bases {
            v_base_kv: 12.66,
            s_base_mva: 1.0,
        },
    }
}
