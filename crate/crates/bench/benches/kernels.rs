use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use htsim::fiber::{projector_contour, HermiteFrame};
use htsim::measure::{synthesize_packet, PacketLayout, WavePacketSpec};
use htsim::propagate::{time_averaged_expectation, Dynamics, EvolutionSpec};
use htsim::{Complex64, FiberPart, GridSpec, GroupPoint, GroupStructure, Gft, PhysicalState, Profile, Symbol, Window};

fn transform(c: &mut Criterion) {
    let g = GroupStructure::heisenberg(1);
    let grid = GridSpec::new(&g, 4.0, 3.0, 32, 32).unwrap();
    let gft = Gft::new(&g, &grid, 12).unwrap();
    let f = PhysicalState::from_fn(&grid, |v, z| {
        Complex64::new((-(v[0] * v[0] + v[1] * v[1])).exp() * (1.0 + z[0].cos()), 0.3 * v[0] * (-(v[1] * v[1])).exp())
    });
    let field = gft.forward(&f).unwrap();
    c.bench_function("gft forward 32x32x32, A=12", |b| b.iter(|| gft.forward(black_box(&f)).unwrap()));
    c.bench_function("gft inverse 32x32x32, A=12", |b| b.iter(|| gft.inverse(black_box(&field))));
}

fn contour(c: &mut Criterion) {
    let frame = HermiteFrame::new(1, 24);
    c.bench_function("contour projector n=2, 64 nodes", |b| b.iter(|| projector_contour(2, black_box(&[1.5]), &frame, 64, 1.0).unwrap()));
}

fn time_average(c: &mut Criterion) {
    let g = GroupStructure::heisenberg(1);
    let spec = WavePacketSpec { x0: GroupPoint { v: vec![0.0, 0.0], z: vec![-0.5] }, lambda0: vec![1.0], n: 1, width_z: 0.3, eps: 0.1 };
    let layout = PacketLayout { n_v: 32, n_z: 64, z_extent: 4.0, v_scale: 12.0, a: 8 };
    let p = synthesize_packet(&g, &spec, &layout).unwrap();
    let es = EvolutionSpec { eps: p.eps, tau: 2.0, window: Window::Bump { start: 0.0, length: 1.0 }, intervals: None };
    let dy = Dynamics::new(&p.gft, &p.field, &es).unwrap();
    let a = Profile::from_fn(&p.gft.grid, |_, z| Complex64::new((-(z[0] * z[0])).exp(), 0.0));
    let sym = Symbol::single(a, FiberPart::Band(1));
    let mut group = c.benchmark_group("dynamics");
    group.sample_size(10);
    group.bench_function("time-averaged expectation, band-1 packet", |b| b.iter(|| time_averaged_expectation(&dy, black_box(&sym), &es.window).unwrap()));
    group.finish();
}

criterion_group!(benches, transform, contour, time_average);
criterion_main!(benches);
