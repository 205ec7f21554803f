#![allow(dead_code)]

use std::collections::BTreeMap;

use radaug_core::domain::{Dataset, Image, ImageDims, ImageSample, Pose, SampleTuple, Weather};
use radaug_core::loss::{relative_pairs, LossParams};
use radaug_core::domain::pose_compose_relative;
use radaug_core::model::{ArchDescriptor, Pooling};
use radaug_core::synth::{generate_dataset, generate_scene, SceneSpec, TrajectorySpec, WeatherTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mix(pairs: &[(Weather, f64)]) -> BTreeMap<Weather, f64> {
    pairs.iter().copied().collect()
}

pub fn dataset(seed: u64, frames: usize, offset: f64, weathers: &[(Weather, f64)], tuple_len: usize) -> Dataset {
    let scene = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
    generate_dataset(
        &scene,
        &TrajectorySpec { frames, offset },
        &mix(weathers),
        &WeatherTable::default(),
        tuple_len,
    )
    .unwrap()
}

pub fn overcast(seed: u64, frames: usize) -> Dataset {
    dataset(seed, frames, 0.0, &[(Weather::Overcast, 1.0)], 3)
}

/// A small network on full-size input, for gradient checks.
pub fn tiny_arch(input: ImageDims) -> ArchDescriptor {
    ArchDescriptor {
        input,
        conv_channels: vec![4, 8],
        hidden: 16,
        pooling: Pooling::Flatten,
        ..ArchDescriptor::default()
    }
}

pub fn random_tuple(dims: ImageDims, len: usize, seed: u64) -> SampleTuple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len)
        .map(|i| {
            let data = (0..dims.len()).map(|_| rng.gen_range(0.0..255.0)).collect();
            let pose = Pose::planar(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0, rng.gen_range(-1.0..1.0));
            ImageSample::new(Image::new(dims, data).unwrap(), pose, Weather::Overcast, i as u64)
        })
        .collect();
    SampleTuple::new(samples).unwrap()
}

/// Signs of every L1 argument inside the tuple loss. A change between two
/// nearby inputs means a kink lies between them.
pub fn l1_signs(pred: &[Pose], truth: &[Pose], params: &LossParams) -> Vec<bool> {
    let mut out = Vec::new();
    for (p, q) in pred.iter().zip(truth) {
        let (a, b) = (p.to_array(), q.to_array());
        out.extend((0..6).map(|c| a[c] > b[c]));
    }
    for (i, j) in relative_pairs(pred.len(), params.pairing) {
        let a = pose_compose_relative(&pred[i], &pred[j]).as_pose().to_array();
        let b = pose_compose_relative(&truth[i], &truth[j]).as_pose().to_array();
        out.extend((0..6).map(|c| a[c] > b[c]));
    }
    out
}
