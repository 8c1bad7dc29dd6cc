use criterion::{criterion_group, criterion_main, Criterion};
use dasim_core::erasure::{extend_blob_default, reconstruct_blob, FieldConfig, LineCodec};
use dasim_core::{BlobGeometry, DeterministicRng};
use rand::Rng;

fn line(c: &mut Criterion) {
    let mut rng = DeterministicRng::new(2, 0);
    let codec = LineCodec::new(FieldConfig::GF16, 256).unwrap();
    let data: Vec<u16> = (0..256).map(|_| rng.gen()).collect();
    let coded = codec.encode(&data).unwrap();
    let half: Vec<Option<u16>> = coded.iter().enumerate().map(|(i, &s)| (i % 2 == 1).then_some(s)).collect();
    c.bench_function("encode_line_k256", |b| b.iter(|| codec.encode(&data).unwrap()));
    c.bench_function("decode_line_k256_half", |b| b.iter(|| codec.decode(&half).unwrap()));
}

fn blob(c: &mut Criterion) {
    let g = BlobGeometry::new(32, 32, 512, 48).unwrap();
    let mut rng = DeterministicRng::new(3, 0);
    let mut source = vec![0u8; 32 * 32 * 512];
    rng.fill(&mut source[..]);
    c.bench_function("extend_blob_32x32", |b| b.iter(|| extend_blob_default(&source, &g).unwrap()));
    let full = extend_blob_default(&source, &g).unwrap();
    let quadrant = full.filtered(|c| c.row >= 32 && c.col >= 32);
    c.bench_function("reconstruct_parity_quadrant_64x64", |b| {
        b.iter(|| reconstruct_blob(quadrant.clone()).unwrap())
    });
}

criterion_group!(benches, line, blob);
criterion_main!(benches);
