mod common;

#[test]
fn analytic_gradients_match_finite_differences() {
    for r in common::gradient_suite() {
        eprintln!("{}: {:e}", r.name, r.max_rel_err);
        assert!(r.max_rel_err < 1e-4, "{}: relative error {:e}", r.name, r.max_rel_err);
    }
}

#[test]
fn suite_reports_every_loss() {
    let names: Vec<&str> = common::gradient_suite().iter().map(|r| r.name).collect();
    for want in ["L_obj", "L_reg", "L_mask (nGWP path)", "L_mil (S_r and S_d softmax paths)", "L_sim"] {
        assert!(names.contains(&want), "{want} missing");
    }
}

#[test]
fn checker_detects_a_wrong_gradient() {
    use weakshot_core::nn::Tensor;
    // Half the value flows through a detached copy of x, so the analytic
    // gradient is half the true one.
    let x = Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap();
    let err = common::grad_check_inputs(&[x], |t, v| {
        let c = t.value(v[0]).clone();
        let k = t.input(c);
        let p = t.sigmoid(k);
        let q = t.sigmoid(v[0]);
        let s = t.add(p, q);
        let s = t.scale(s, 0.5);
        let s = t.reshape(s, &[3, 1]);
        t.weighted_smooth_l1(s, vec![0.0; 3], vec![1.0; 3], 1.0, 1.0)
    });
    assert!(err > 1e-2, "checker missed a detached path: {err}");
}
