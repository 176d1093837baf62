//! Mini-batch gradient descent over a flat parameter vector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Step schedule shared by every trainable model in the crate.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Runs `epochs` passes of shuffled mini-batch descent. `grad` receives the
/// batch indices and current parameters and must write the mean gradient
/// (regularizer included) into its output slice. The step size decays as
/// `learning_rate / sqrt(epoch)`.
pub(crate) fn minibatch_descent<G>(n: usize, schedule: Schedule, params: &mut [f64], mut grad: G)
where
    G: FnMut(&[usize], &[f64], &mut [f64]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut g = vec![0.0; params.len()];
    let batch = schedule.batch_size.max(1);
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let step = schedule.learning_rate / (epoch as f64).sqrt();
        for chunk in order.chunks(batch) {
            g.iter_mut().for_each(|v| *v = 0.0);
            grad(chunk, params, &mut g);
            for (p, d) in params.iter_mut().zip(&g) {
                *p -= step * d;
            }
        }
    }
}
