//! Seeded synthetic classification tasks: each class has a fixed random
//! pixel pattern and samples are that pattern plus Gaussian noise, which
//! makes the classes linearly separable in pixel space for small noise.

use crate::tensor::Tensor;
use crate::vit::ViTConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One labeled sample.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

/// Disjoint splits, reproducible from the task seed.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Generator spec for a synthetic task. 80% of samples train; the held-out
/// 20% is split evenly into validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub num_classes: usize,
    /// Total sample count across all splits.
    pub samples: usize,
    /// Noise std around the class pattern.
    pub noise: f32,
    /// Magnitude of the class pattern entries.
    pub margin: f32,
}

impl SyntheticTask {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        SyntheticTask {
            seed,
            num_classes,
            samples: 250,
            noise: 0.1,
            margin: 1.0,
        }
    }

    /// Materializes the dataset for a backbone's image geometry.
    pub fn generate(&self, cfg: &ViTConfig) -> TaskData {
        assert!(self.num_classes >= 2, "need at least two classes");
        assert!(self.samples >= 10, "need at least ten samples");
        let shape = [cfg.channels, cfg.image_size, cfg.image_size];
        let numel: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // Fixed ±margin pattern per class.
        let patterns: Vec<Vec<f32>> = (0..self.num_classes)
            .map(|_| {
                (0..numel)
                    .map(|_| {
                        if rand::Rng::gen_bool(&mut rng, 0.5) {
                            self.margin
                        } else {
                            -self.margin
                        }
                    })
                    .collect()
            })
            .collect();

        let mut examples: Vec<Example> = (0..self.samples)
            .map(|i| {
                let label = i % self.num_classes;
                let noise = Tensor::randn(&shape, self.noise, &mut rng);
                let data: Vec<f32> = patterns[label]
                    .iter()
                    .zip(noise.data())
                    .map(|(m, n)| m + n)
                    .collect();
                Example {
                    image: Tensor::new(&shape, data).expect("shape"),
                    label,
                }
            })
            .collect();
        examples.shuffle(&mut rng);

        let n = examples.len();
        let n_train = ((n as f64) * 0.8).round() as usize;
        let n_val = ((n - n_train) / 2).max(1);
        let train: Vec<Example> = examples.drain(..n_train.min(n - 2)).collect();
        let val: Vec<Example> = examples.drain(..n_val.min(examples.len() - 1)).collect();
        TaskData {
            train,
            val,
            test: examples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_everything() {
        let task = SyntheticTask::new(2, 7);
        let data = task.generate(&tiny_cfg());
        assert_eq!(
            data.train.len() + data.val.len() + data.test.len(),
            task.samples
        );
        assert!(data.train.len() >= task.samples * 7 / 10);
        assert!(!data.val.is_empty());
        assert!(!data.test.is_empty());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let task = SyntheticTask::new(3, 11);
        let cfg = tiny_cfg();
        let a = task.generate(&cfg);
        let b = task.generate(&cfg);
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image, y.image);
        }
        let other = SyntheticTask::new(3, 12).generate(&cfg);
        assert_ne!(a.train[0].image, other.train[0].image);
    }

    #[test]
    fn labels_are_balanced() {
        let task = SyntheticTask::new(2, 7);
        let data = task.generate(&tiny_cfg());
        let all = data
            .train
            .iter()
            .chain(&data.val)
            .chain(&data.test)
            .filter(|e| e.label == 0)
            .count();
        assert_eq!(all, task.samples / 2);
    }
}
