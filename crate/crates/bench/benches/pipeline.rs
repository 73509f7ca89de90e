use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mrf_bench::fixture;
use mrf_core::dict::{make_grid, simulate_dictionary, GridAxis};
use mrf_core::nn::Network;
use mrf_core::proxnet::{decoder_spec, encoder_spec, infer, PgdNet};
use mrf_core::recon_dm::{blip, build_fgm_index, dm_match, fgm_match, BlipOptions, Projection};
use mrf_core::seqsim::epg_simulate;

fn simulation(c: &mut Criterion) {
    let f = fixture(32);
    c.bench_function("epg_fingerprint", |b| b.iter(|| epg_simulate(&f.seq, black_box(1000.0), black_box(100.0)).unwrap()));
    let grid = make_grid(GridAxis::new(100.0, 200.0, 4000.0), GridAxis::new(20.0, 40.0, 600.0)).unwrap();
    c.bench_function("dictionary_300_atoms", |b| b.iter(|| simulate_dictionary(&grid, &f.seq).unwrap()));
}

fn operators(c: &mut Criterion) {
    let f = fixture(128);
    let x = f.model.adjoint(&f.y).unwrap();
    c.bench_function("forward_128", |b| b.iter(|| f.model.apply(black_box(&x)).unwrap()));
    c.bench_function("adjoint_128", |b| b.iter(|| f.model.adjoint(black_box(&f.y)).unwrap()));
}

fn matching(c: &mut Criterion) {
    let f = fixture(32);
    let x = f.model.adjoint(&f.y).unwrap();
    let index = build_fgm_index(&f.cdict, 80, 1).unwrap();
    let mut g = c.benchmark_group("matching_32");
    g.sample_size(10);
    g.bench_function("dm", |b| b.iter(|| dm_match(black_box(&x), &f.cdict).unwrap()));
    g.bench_function("fgm_keep_0.1", |b| b.iter(|| fgm_match(black_box(&x), &index, &f.cdict, 0.1).unwrap()));
    g.bench_function("blip", |b| b.iter(|| blip(&f.y, &f.model, &f.cdict, Projection::Exhaustive, BlipOptions::default()).unwrap()));
    g.finish();
}

fn pgdnet(c: &mut Criterion) {
    let f = fixture(128);
    let norm = mrf_core::proxnet::NormalizationSpec::new(1.0).unwrap();
    let enc = Network::<f32>::from_spec(&encoder_spec(10), 1).unwrap();
    let dec = Network::<f32>::from_spec(&decoder_spec(10), 2).unwrap();
    let mut g = c.benchmark_group("pgdnet_128");
    g.sample_size(10);
    for t in [1, 2, 5] {
        let net = PgdNet::new(enc.clone(), dec.clone(), t, norm).unwrap();
        g.bench_function(format!("infer_t{t}"), |b| b.iter(|| infer(&net, &f.y, &f.model).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, simulation, operators, matching, pgdnet);
criterion_main!(benches);
