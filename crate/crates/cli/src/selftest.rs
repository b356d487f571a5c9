//! In-tree invariant suite: verifies the load-bearing algebraic properties
//! (gating, low-rank merge, zero-init transparency, modulator identity,
//! gradients) without any data or trained artifacts.

use anyhow::bail;
use ndarray::{Array1, Array2, Array4, ArrayD};

use lorair_core::autograd::Tape;
use lorair_core::moe::{self, MoeConfig};
use lorair_core::net::{ModulatorKind, Net, NetConfig};
use lorair_core::params::{bind, ParamStore};
use lorair_core::router::{softmax, top_k_gate};
use lorair_core::seeds;

type Check = (&'static str, fn() -> Result<(), String>);

pub fn run() -> anyhow::Result<()> {
    let checks: &[Check] = &[
        ("top-k gate normalization and index oracle", gate_check),
        ("low-rank merge equivalence (k = 1)", merge_check),
        ("zero-init expert transparency", zero_init_check),
        ("modulator saturated-gate identity and residual algebra", dam_check),
        ("analytic vs finite-difference gradients", grad_check),
    ];
    let mut failed = 0usize;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} selftest propert{} failed", if failed == 1 { "y" } else { "ies" });
    }
    println!("all properties hold");
    Ok(())
}

fn randn(seed: u64, tag: &str, shape: &[usize]) -> ArrayD<f64> {
    use rand::Rng as _;
    let mut rng = seeds::rng(seed, tag, 0);
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen::<f64>() - 0.5)
}

fn gate_check() -> Result<(), String> {
    use rand::Rng as _;
    let n = 6;
    for trial in 0..500u64 {
        let mut rng = seeds::rng(11, "selftest-gate", trial);
        let logits = Array1::from_shape_fn(n, |_| rng.gen::<f32>() * 8.0 - 4.0);
        for k in [1usize, 2, 6] {
            let g = top_k_gate(&logits, k).map_err(|e| e.to_string())?;
            if g.indices.len() != k || g.weights.len() != k {
                return Err(format!("k={k}: wrong support size"));
            }
            let sum: f32 = g.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(format!("k={k}: weights sum to {sum}"));
            }
            // sort-based oracle for the selected indices
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
            });
            let mut expect = order[..k].to_vec();
            expect.sort_unstable();
            let mut got = g.indices.clone();
            got.sort_unstable();
            if got != expect {
                return Err(format!("k={k}: indices {got:?} != oracle {expect:?}"));
            }
            if k == n {
                let full = softmax(&logits);
                for (&i, &w) in g.indices.iter().zip(&g.weights) {
                    if (w - full[i]).abs() > 1e-6 {
                        return Err(format!("k=n disagrees with softmax at {i}"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn tiny_net(modulator: ModulatorKind, elem_seed: u64) -> Result<Net<f64>, String> {
    let cfg = NetConfig {
        base_width: 4,
        num_scales: 2,
        enc_blocks: vec![1],
        mid_blocks: 1,
        dec_blocks: vec![1],
        modulator,
        c_clip: 8,
    };
    Net::init(cfg, elem_seed).map_err(|e| e.to_string())
}

fn merge_check() -> Result<(), String> {
    let mut net = tiny_net(ModulatorKind::None, 3)?;
    let cfg = MoeConfig { n: 3, k: 1, rank: 2, alpha: 4.0 };
    moe::init_experts(&mut net, &cfg, 7).map_err(|e| e.to_string())?;
    let site = "enc0/blk0/pw1";
    use rand::Rng as _;
    let mut rng = seeds::rng(13, "selftest-bfill", 0);
    for i in 0..3 {
        net.params
            .get_mut(&format!("experts/{site}/{i}/B"))
            .mapv_inplace(|_| rng.gen::<f64>() - 0.5);
    }
    let x = randn(17, "selftest-x", &[1, 4, 4, 4]);
    for i in 0..3 {
        // one-hot gate on expert i
        let mut logits = Array1::<f32>::zeros(3);
        logits[i] = 30.0;
        let gate = top_k_gate(&logits, 1).map_err(|e| e.to_string())?;
        let ctx = moe::gate_context::<f64>(&gate, 1, &cfg);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &net.params);
        let xv = tape.constant(x.clone());
        let y = net
            .lora_site_forward(&mut tape, &bound, site, xv, Some(&ctx))
            .map_err(|e| e.to_string())?;
        let gated = tape.value(y).clone();
        // merged oracle: conv1x1 with W0 + s B A
        let merged: Array2<f64> =
            moe::merge_expert(&net, &cfg, site, i).map_err(|e| e.to_string())?;
        let mut store = ParamStore::<f64>::new();
        store.insert("w", merged.into_dyn(), false);
        store.insert("b", net.params.get(&format!("{site}/b")).clone(), false);
        let mut t2 = Tape::new();
        let b2 = bind(&mut t2, &store);
        let xv2 = t2.constant(x.clone());
        let y2 = t2.conv1x1(xv2, b2.var("w"), Some(b2.var("b")));
        let oracle = t2.value(y2).clone();
        let err = (&gated - &oracle)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        let scale = oracle.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if err > 1e-10 * (1.0 + scale) {
            return Err(format!("expert {i}: merged mismatch {err}"));
        }
    }
    Ok(())
}

fn zero_init_check() -> Result<(), String> {
    let base = tiny_net(ModulatorKind::None, 19)?;
    let mut wrapped = Net {
        cfg: base.cfg.clone(),
        params: base.params.clone(),
        experts: None,
    };
    let cfg = MoeConfig { n: 4, k: 2, rank: 2, alpha: 4.0 };
    moe::init_experts(&mut wrapped, &cfg, 23).map_err(|e| e.to_string())?;
    let gate = top_k_gate(&Array1::zeros(4), 2).map_err(|e| e.to_string())?;
    for trial in 0..4u64 {
        let x: Array4<f64> = randn(trial + 29, "selftest-img", &[1, 3, 8, 8])
            .into_dimensionality()
            .unwrap();
        let fwd = |net: &Net<f64>, ctx| -> Result<ArrayD<f64>, String> {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &net.params);
            let xv = tape.constant(x.clone().into_dyn());
            let y = net
                .forward(&mut tape, &bound, xv, None, ctx)
                .map_err(|e| e.to_string())?;
            Ok(tape.value(y).clone())
        };
        let ctx = moe::gate_context::<f64>(&gate, 1, &cfg);
        let a = fwd(&base, None)?;
        let b = fwd(&wrapped, Some(&ctx))?;
        if a != b {
            return Err(format!("trial {trial}: fresh experts changed the function"));
        }
    }
    Ok(())
}

/// The modulator formula built directly from public tape ops:
/// `out = LN(x) ⊙ sigmoid(e Wᵀ + b) + x`.
fn dam_forward(
    x: &ArrayD<f64>,
    e: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let c = x.shape()[1];
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.clone());
    let gamma = tape.constant(lorair_core::params::ones::<f64>(&[c]));
    let beta = tape.constant(lorair_core::params::zeros::<f64>(&[c]));
    let ln = tape.layernorm_chan(xv, gamma, beta);
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let pre = tape.linear(ev, wv, Some(bv));
    let gate = tape.sigmoid(pre);
    let scaled = tape.channel_scale(ln, gate);
    let out = tape.add(scaled, xv);
    (
        tape.value(out).clone(),
        tape.value(ln).clone(),
        tape.value(gate).clone(),
    )
}

fn dam_check() -> Result<(), String> {
    let x = randn(31, "selftest-dam-x", &[2, 4, 5, 5]);
    let e = randn(37, "selftest-dam-e", &[2, 8]);
    // saturated gate: zero weight, bias -20 -> identity within tolerance
    let w0 = ArrayD::zeros(ndarray::IxDyn(&[4, 8]));
    let bneg = ArrayD::from_elem(ndarray::IxDyn(&[4]), -20.0);
    let (out, ln, _) = dam_forward(&x, &e, &w0, &bneg);
    let dev = (&out - &x).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let ln_inf = ln.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    if dev > 1e-6 * (1.0 + ln_inf) {
        return Err(format!("saturated gate is not the identity: {dev}"));
    }
    // residual algebra on a random gate
    let w = randn(41, "selftest-dam-w", &[4, 8]);
    let b = randn(43, "selftest-dam-b", &[4]);
    let (out, ln, gate) = dam_forward(&x, &e, &w, &b);
    for bi in 0..2 {
        for c in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    let lhs = out[[bi, c, i, j]] - x[[bi, c, i, j]];
                    let rhs = ln[[bi, c, i, j]] * gate[[bi, c]];
                    if (lhs - rhs).abs() > 1e-6 {
                        return Err(format!("residual decomposition broke: {lhs} vs {rhs}"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn grad_check() -> Result<(), String> {
    // analytic vs central finite differences through one full tiny network
    let net = tiny_net(ModulatorKind::Dam, 47)?;
    let x = randn(53, "selftest-grad-x", &[1, 3, 8, 8]);
    let e = randn(59, "selftest-grad-e", &[1, 8]);
    let target = randn(61, "selftest-grad-t", &[1, 3, 8, 8]);
    let e2: ndarray::Array2<f64> = e.clone().into_dimensionality().unwrap();

    // analytic gradients
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &net.params);
    let xv = tape.constant(x.clone());
    let y = net
        .forward(&mut tape, &bound, xv, Some(&e2), None)
        .map_err(|er| er.to_string())?;
    let l = tape.psnr_loss(y, &target);
    let grads = tape.backward(l);
    let gmap = bound.grads(&net.params, &grads);

    let probes = [
        "intro/w",
        "enc0/blk0/pw1/w",
        "enc0/dam/w2",
        "mid/blk0/dw/w",
        "outro/b",
    ];
    let h = 1e-6;
    use rand::Rng as _;
    let mut rng = seeds::rng(67, "selftest-grad-pick", 0);
    for path in probes {
        let len = net.params.get(path).len();
        let idx = rng.gen_range(0..len);
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut p = net.params.clone();
            p.get_mut(path).as_slice_mut().unwrap()[idx] += delta;
            let mut t = Tape::new();
            let b = bind(&mut t, &p);
            let xv = t.constant(x.clone());
            let y = net
                .forward(&mut t, &b, xv, Some(&e2), None)
                .map_err(|er| er.to_string())?;
            let l = t.psnr_loss(y, &target);
            Ok(t.scalar(l))
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let analytic = gmap
            .get(path)
            .map(|g| g.as_slice().unwrap()[idx])
            .unwrap_or(0.0);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > 1e-4 {
            return Err(format!("{path}[{idx}]: analytic {analytic} vs numeric {numeric}"));
        }
    }
    Ok(())
}
