use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigkit::gvb::voxelize;
use rigkit::io::{synth_rig, Template};
use rigkit::metrics::{evaluate, MatchConfig};
use rigkit::skeleton::{Skeleton, Vec3};
use rigkit::tokenizer::{detokenize, tokenize_skeleton, Vocab};

fn random_skeleton(rng: &mut ChaCha8Rng, k: usize) -> Skeleton {
    let mut joints = vec![Vec3::new(0.0, 0.0, 0.0)];
    let mut parents = vec![-1];
    while joints.len() < k {
        let p = rng.gen_range(0..joints.len());
        let step = Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        joints.push(joints[p].add(step));
        parents.push(p as i32);
    }
    // keep everything inside the normalized cube
    for j in &mut joints {
        j.x = j.x.clamp(-1.0, 1.0);
        j.y = j.y.clamp(-1.0, 1.0);
        j.z = j.z.clamp(-1.0, 1.0);
    }
    Skeleton { joints, parents }
}

fn bench_tokenizer(c: &mut Criterion) {
    let vocab = Vocab::new(256);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let skeletons: Vec<Skeleton> = (0..64).map(|_| random_skeleton(&mut rng, 50)).collect();
    c.bench_function("tokenize_detokenize_50_joints", |b| {
        let mut i = 0;
        b.iter(|| {
            let s = &skeletons[i % skeletons.len()];
            i += 1;
            let toks = tokenize_skeleton(s, &vocab).unwrap();
            detokenize(&toks, &vocab).unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_skeleton(&mut rng, 40);
    let b = random_skeleton(&mut rng, 40);
    let cfg = MatchConfig::default();
    c.bench_function("evaluate_40_vs_40_joints", |bench| {
        bench.iter(|| evaluate(&a, &b, &cfg).unwrap())
    });
}

fn bench_voxelize(c: &mut Criterion) {
    let asset = synth_rig(3, 8, Template::Quadruped).unwrap();
    c.bench_function("voxelize_quadruped_r32", |b| {
        b.iter_batched(
            || asset.mesh.clone(),
            |mesh| voxelize(&mesh, 32).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_tokenizer, bench_metrics, bench_voxelize);
criterion_main!(benches);
