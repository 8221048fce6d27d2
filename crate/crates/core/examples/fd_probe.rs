// drill into the encoder chain
use trajepa::encoder::{EncoderConfig, init_encoder};
use trajepa::numerics::{grad_check, ParamStore, Tensor};
use trajepa::numerics::params::{seeded_rng, xavier_uniform};
use rand::Rng;

fn main() {
    let enc_cfg = EncoderConfig { d_z: 8, hidden: 10, dropout: 0.0 };
    let enc = init_encoder(&enc_cfg, 100).unwrap().to_f64_store();
    let mut rng = seeded_rng(4, &["probe"]);
    let mut x = Tensor::<f64>::zeros(9, 43);
    for i in 0..9 { for j in 0..43 { x.set(i, j, rng.gen::<f64>() - 0.3); } }

    // full body chain
    let xx = x.clone();
    let err = grad_check(move |tape, vars| {
        let inp = tape.constant(xx.clone());
        let h0 = tape.matmul(inp, false, vars["body.w_in"], true);
        let h0 = tape.add_row_broadcast(h0, vars["body.b_in"]);
        let mut h = tape.gelu(h0);
        for layer in ["1", "2"] {
            let w = vars[&format!("body.w{layer}")];
            let b = vars[&format!("body.b{layer}")];
            let pre = tape.matmul(h, false, w, true);
            let pre = tape.add_row_broadcast(pre, b);
            let a = tape.gelu(pre);
            h = tape.add(h, a);
        }
        let out = tape.matmul(h, false, vars["body.w_out"], true);
        let out = tape.add_row_broadcast(out, vars["body.b_out"]);
        let z = tape.layer_norm(out, vars["body.ln_gamma"], vars["body.ln_beta"], 1e-5);
        Ok(tape.sum(z))
    }, &enc, 1e-5).unwrap();
    println!("body with final LN: {err:.3e}");

    // same without the final LN
    let xx = x.clone();
    let err = grad_check(move |tape, vars| {
        let inp = tape.constant(xx.clone());
        let h0 = tape.matmul(inp, false, vars["body.w_in"], true);
        let h0 = tape.add_row_broadcast(h0, vars["body.b_in"]);
        let mut h = tape.gelu(h0);
        for layer in ["1", "2"] {
            let w = vars[&format!("body.w{layer}")];
            let b = vars[&format!("body.b{layer}")];
            let pre = tape.matmul(h, false, w, true);
            let pre = tape.add_row_broadcast(pre, b);
            let a = tape.gelu(pre);
            h = tape.add(h, a);
        }
        let out = tape.matmul(h, false, vars["body.w_out"], true);
        let out = tape.add_row_broadcast(out, vars["body.b_out"]);
        Ok(tape.sum(out))
    }, &enc, 1e-5).unwrap();
    println!("body without final LN: {err:.3e}");

    // LN alone on a leaf
    let mut p = ParamStore::new();
    p.insert("x", xavier_uniform::<f64>(9, 8, &mut rng)).unwrap();
    p.insert("g", Tensor::full(1, 8, 1.0)).unwrap();
    p.insert("b", Tensor::zeros(1, 8)).unwrap();
    let err = grad_check(move |tape, vars| {
        let z = tape.layer_norm(vars["x"], vars["g"], vars["b"], 1e-5);
        Ok(tape.sum(z))
    }, &p, 1e-5).unwrap();
    println!("LN alone (sum): {err:.3e}");
}
