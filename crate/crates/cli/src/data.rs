//! Dataset construction from the configuration.

use std::path::Path;

use influence_core::data::{load_csv, load_idx, load_iris, split, standardize, synth_blobs, Dataset};
use influence_core::data::LabeledInstance;
use influence_core::linalg::{dot, DenseMatrix};
use influence_core::objective::QuadraticObjective;
use influence_core::rng::RngStream;

use crate::config::DatasetSpec;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("dataset file not found: {}", path.display())))
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("dataset: {e}"))
}

fn finish(ds: Dataset, test_fraction: f64, split_seed: u64, scale: bool) -> Result<Splits, CliError> {
    let (train, test) = split(&ds, test_fraction, &mut RngStream::new(split_seed)).map_err(data_err)?;
    if !scale {
        return Ok(Splits { train, test });
    }
    let (train, mut rest, _) = standardize(&train, &[test]);
    Ok(Splits {
        train,
        test: rest.remove(0),
    })
}

/// Train and test sets described by `spec`.
pub fn load(spec: &DatasetSpec) -> Result<Splits, CliError> {
    match spec {
        DatasetSpec::Iris {
            path,
            test_fraction,
            split_seed,
            standardize,
        } => {
            require(path)?;
            finish(load_iris(path).map_err(data_err)?, *test_fraction, *split_seed, *standardize)
        }
        DatasetSpec::Csv {
            path,
            n_features,
            test_fraction,
            split_seed,
            standardize,
        } => {
            require(path)?;
            finish(load_csv(path, *n_features).map_err(data_err)?, *test_fraction, *split_seed, *standardize)
        }
        DatasetSpec::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let file = |n: &str| dir.join(n);
            let names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
            for n in names {
                require(&file(n))?;
            }
            let train = load_idx(&file(names[0]), &file(names[1]), Some(*train_limit)).map_err(data_err)?;
            let test = load_idx(&file(names[2]), &file(names[3]), Some(*test_limit)).map_err(data_err)?;
            Ok(Splits { train, test })
        }
        DatasetSpec::Blobs {
            n,
            features,
            classes,
            spread,
            test_fraction,
            seed,
        } => {
            let ds = synth_blobs(*n, *features, *classes, *spread, &mut RngStream::new(*seed)).map_err(data_err)?;
            finish(ds, *test_fraction, *seed, false)
        }
        DatasetSpec::Quadratic { .. } => Err(CliError::Config(
            "dataset kind \"quadratic\" has no instances; it is only usable with the eigen command".into(),
        )),
    }
}

/// `A = R diag(eigenvalues) R` with a random Householder reflection `R`,
/// centred at the origin.
pub fn quadratic_objective(eigenvalues: &[f64], seed: u64) -> QuadraticObjective {
    let d = eigenvalues.len();
    let mut u = RngStream::new(seed).normal(d);
    let nu = dot(&u, &u).sqrt();
    u.iter_mut().for_each(|x| *x /= nu);
    let r = |i: usize, j: usize| f64::from(u8::from(i == j)) - 2.0 * u[i] * u[j];
    let mut a = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a.set(i, j, (0..d).map(|k| r(i, k) * eigenvalues[k] * r(k, j)).sum());
        }
    }
    a.symmetrize();
    QuadraticObjective::new(a, vec![LabeledInstance::new(vec![0.0; d], 0)])
}
