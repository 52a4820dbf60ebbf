//! Shard encode/decode at a million nonzeros. Timing is reported, not asserted.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcell::datastore::SparseBlock;

#[test]
fn million_nonzero_roundtrip() {
    let (rows, cols, per_row) = (10_000usize, 2_000usize, 100usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut offsets = vec![0u64];
    let mut indices = Vec::with_capacity(rows * per_row);
    let mut values = Vec::with_capacity(rows * per_row);
    for _ in 0..rows {
        let start = rng.random_range(0..cols - per_row * 10) as u32;
        for k in 0..per_row as u32 {
            indices.push(start + 10 * k);
            values.push(rng.random_range(0.1f32..5.0));
        }
        offsets.push(indices.len() as u64);
    }
    let block = SparseBlock::new(rows, cols, offsets, indices, values).unwrap();
    assert_eq!(block.nnz(), 1_000_000);

    let t = Instant::now();
    let bytes = block.encode();
    let enc = t.elapsed();
    let t = Instant::now();
    let back = SparseBlock::decode(&bytes, Path::new("bench.shard")).unwrap();
    let dec = t.elapsed();
    assert_eq!(back, block);
    eprintln!(
        "{} nonzeros, {} bytes: encode {enc:?}, decode {dec:?}",
        block.nnz(),
        bytes.len()
    );
}
