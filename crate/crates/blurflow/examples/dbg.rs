use blurflow::datagen::*;
use blurflow::deblur::*;
use blurflow::geometry::FrameLayout;
use blurflow::metrics::psnr;
use blurflow::types::EnergyParams;
use blurflow::blur::build_kernel;

fn run_gt_deblur(spec: &SceneSpec, theta3: f64, iters: usize) {
    let bundle = generate(spec).unwrap();
    let layout = FrameLayout::three_frame();
    let mut params = EnergyParams::unit_scale();
    params.theta3 = theta3;
    params.theta1 = 0.0;
    let ops: Vec<_> = (0..6)
        .map(|i| {
            let (fwd, bwd) = &bundle.frame_flows[i];
            build_kernel(fwd, bwd, spec.tau, 64).unwrap()
        })
        .collect();
    let problem = LatentProblem::from_operators(ops, layout.reference_index());
    let solve = solve_latents(&problem, &bundle.blurred, &bundle.blurred, &params, iters, 1e-9).unwrap();
    let mut blurred_psnr = 0.0;
    let mut est_psnr = 0.0;
    let mut min_gain = f64::INFINITY;
    for i in 0..6 {
        let pb = psnr(&bundle.blurred[i], &bundle.latents[i]).unwrap();
        let pe = psnr(&solve.latents[i], &bundle.latents[i]).unwrap();
        blurred_psnr += pb / 6.0;
        est_psnr += pe / 6.0;
        min_gain = min_gain.min(pe - pb);
    }
    println!(
        "theta3={theta3:>8.0} iters={iters}: blurred {blurred_psnr:.2} dB -> {est_psnr:.2} dB, min gain {min_gain:+.2} dB"
    );
}

fn main() {
    let mut spec = SceneSpec::default_scene();
    println!("== default texture (scales {:?})", spec.texture_scales);
    // equivalence check for this texture
    let bundle = generate(&spec).unwrap();
    let (fwd, bwd) = &bundle.frame_flows[1];
    let op = build_kernel(fwd, bwd, spec.tau, 64).unwrap();
    println!("equiv rmse: {:.5}", op.apply(&bundle.latents[1]).unwrap().rmse(&bundle.blurred[1]));
    for theta3 in [178.0, 1000.0, 5000.0, 20000.0] {
        run_gt_deblur(&spec, theta3, 40);
    }
    for scales in [vec![4.0, 9.0, 19.0], vec![3.0, 6.0, 13.0]] {
        spec.texture_scales = scales.clone();
        println!("== texture scales {:?}", scales);
        let bundle = generate(&spec).unwrap();
        let (fwd, bwd) = &bundle.frame_flows[1];
        let op = build_kernel(fwd, bwd, spec.tau, 64).unwrap();
        println!("equiv rmse: {:.5}", op.apply(&bundle.latents[1]).unwrap().rmse(&bundle.blurred[1]));
        for theta3 in [178.0, 1000.0, 5000.0, 20000.0] {
            run_gt_deblur(&spec, theta3, 40);
        }
    }
}
