//! Hot-kernel benchmarks: fusion, extraction, rendering, raycasting, ICP,
//! and hypothesis scoring.
//!
//! The `parallel` feature is a compile-time switch, so comparing the
//! data-parallel kernels against the sequential fallback means running this
//! suite twice:
//!
//! ```text
//! cargo bench -p objpose
//! cargo bench -p objpose --no-default-features
//! ```
//!
//! Criterion keeps per-benchmark baselines under `target/criterion`, so the
//! second run reports the delta against the first.

use criterion::{criterion_group, criterion_main, Criterion};
use objpose::geom::{Intrinsics, Pose};
use objpose::model::{build_model, build_model_and_volume, BuildParams, ReferenceSet};
use objpose::pose::{
    refine_pose, score_pose, CertainSurface, IcpParams, ScoreWeights, Thresholds,
};
use objpose::raster::rasterize;
use objpose::synth;
use objpose::volume::{raycast_render, RaycastConfig};
use std::hint::black_box;

struct Fixture {
    refs: ReferenceSet,
    k: Intrinsics,
    params: BuildParams,
}

fn fixture() -> Fixture {
    let mesh = synth::icosphere_mesh(0.08, 2).expect("sphere mesh");
    let k = Intrinsics::new(160.0, 160.0, 80.0, 60.0, 160, 120);
    let refs = synth::icosphere_reference_views(&mesh, &k, 1, 12, 2.5).expect("reference views");
    let params = BuildParams { resolution: 96, ..BuildParams::default() };
    Fixture { refs, k, params }
}

fn bench_fusion(c: &mut Criterion) {
    let f = fixture();
    let rf = &f.refs.frames[0];
    let (_, vol) = build_model_and_volume(
        &f.refs,
        &ReferenceSet::default(),
        &f.params,
        objpose::model::Provenance::FromReferences,
        0,
    )
    .expect("volume");
    c.bench_function("tsdf_integrate_frame", |b| {
        let mut vol = vol.clone();
        b.iter(|| vol.integrate_frame(&rf.frame, &rf.pose, &rf.k));
    });
    c.bench_function("build_model_12_views", |b| {
        b.iter(|| build_model_and_volume(
            black_box(&f.refs),
            &ReferenceSet::default(),
            &f.params,
            objpose::model::Provenance::FromReferences,
            0,
        ));
    });
}

fn bench_render(c: &mut Criterion) {
    let f = fixture();
    let model = build_model(&f.refs, &f.params).expect("model");
    let pose = f.refs.frames[0].pose;
    c.bench_function("rasterize_model", |b| {
        b.iter(|| rasterize(black_box(&model), &pose, &f.k));
    });
    let (_, vol) = build_model_and_volume(
        &f.refs,
        &ReferenceSet::default(),
        &f.params,
        objpose::model::Provenance::FromReferences,
        0,
    )
    .expect("volume");
    let raycast_cfg = RaycastConfig::for_volume(&vol, 1.0);
    c.bench_function("raycast_render", |b| {
        b.iter(|| raycast_render(black_box(&vol), &pose, &f.k, &raycast_cfg, None));
    });
}

fn bench_pose(c: &mut Criterion) {
    let f = fixture();
    let model = build_model(&f.refs, &f.params).expect("model");
    let icp = IcpParams::default();
    let surface = CertainSurface::from_model(&model, icp.max_points);
    let rf = &f.refs.frames[0];
    // Perturb the true pose a little so refinement has work to do.
    let nudge = Pose::new(
        objpose::geom::exp_so3(&nalgebra::Vector3::new(0.02, -0.015, 0.01)),
        nalgebra::Vector3::new(0.004, -0.002, 0.006),
    );
    let init = rf.pose.compose(&nudge);
    c.bench_function("icp_refine_5_iters", |b| {
        b.iter(|| refine_pose(black_box(&surface), &rf.frame, &rf.k, &init, 5, &icp));
    });
    let th = Thresholds {
        t_u: 0.5,
        t_s: 0.5,
        t_conf: 0.5,
        t_complete: 0.7,
        t_geo: 10f64.to_radians(),
        t_gen: 45f64.to_radians(),
    };
    let w = ScoreWeights::default();
    c.bench_function("score_pose", |b| {
        b.iter(|| {
            score_pose(
                black_box(&model),
                &surface,
                &rf.frame,
                &rf.k,
                &rf.pose,
                &th,
                &w,
                f.params.truncation_m,
                &icp,
            )
        });
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = bench_fusion, bench_render, bench_pose
}
criterion_main!(kernels);
