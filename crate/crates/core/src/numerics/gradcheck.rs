use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Which coordinates of a parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `n` coordinates, drawn without replacement from `seed`.
    Sample {
        n: usize,
        seed: u64,
    },
}

/// Maximum relative error between the analytic gradient of `f` with respect
/// to `param` and central differences `(f(x+h) - f(x-h)) / 2h`.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `param` is treated as trainable for the duration of the check.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, param: ParamId, h: f64, coords: Coords, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let was_trainable = store.get(param).trainable;
    store.get_mut(param).trainable = true;
    let result = check(store, param, h, coords, &f);
    store.get_mut(param).trainable = was_trainable;
    result
}

fn check<F>(store: &mut ParamStore<f64>, param: ParamId, h: f64, coords: Coords, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        grads
            .get(param)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(param).shape()))
    };
    let numel = analytic.numel();
    let picked: Vec<usize> = match coords {
        Coords::All => (0..numel).collect(),
        Coords::Sample { n, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, numel, n.min(numel)).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    for i in picked {
        let x0 = store.value(param).data()[i];
        store.get_mut(param).value.data_mut()[i] = x0 + h;
        let plus = eval(store);
        store.get_mut(param).value.data_mut()[i] = x0 - h;
        let minus = eval(store);
        store.get_mut(param).value.data_mut()[i] = x0;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store
            .insert("x", Tensor::vector(&[0.3, -1.2, 2.5, 0.01]), true)
            .unwrap();
        let err = finite_diff_check(&mut store, x, 1e-5, Coords::All, |g| {
            let v = g.param(x);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn restores_trainability_and_values() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::vector(&[1.0, 2.0]), false).unwrap();
        let before = store.value(x).clone();
        finite_diff_check(&mut store, x, 1e-5, Coords::Sample { n: 1, seed: 3 }, |g| {
            let v = g.param(x);
            g.sum(v)
        })
        .unwrap();
        assert!(!store.get(x).trainable);
        assert_eq!(store.value(x), &before);
    }
}
