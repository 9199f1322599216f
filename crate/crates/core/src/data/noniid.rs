use rand::{Rng, RngExt};

use crate::error::{Error, Result};

/// Share of each majority class in a client's data.
pub const MAJORITY_RANGE: (f64, f64) = (0.15, 0.25);
/// Shares of minority classes stay below this value.
pub const MINORITY_CAP: f64 = 0.08;
/// Smallest minority share, so that no class column of a client's priors vanishes.
pub const MINORITY_FLOOR: f64 = 0.005;

const MAX_ATTEMPTS: usize = 10_000;

/// Class-fraction profile of each client under the majority/minority split.
///
/// Client `c` gets classes `c·m, …, c·m + m − 1` (mod `K`) as its `m`
/// majority classes. Majority shares lie in [`MAJORITY_RANGE`], minority
/// shares in `[MINORITY_FLOOR, MINORITY_CAP)`, and every profile sums to 1.
pub fn allocate_clients_noniid<R: Rng + ?Sized>(
    classes: usize,
    clients: usize,
    majority_per_client: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let maj = majority_per_client;
    if maj == 0 || classes < maj + 1 {
        return Err(Error::Allocation(format!(
            "need 1 <= majority classes < K; got {maj} of {classes}"
        )));
    }
    if clients == 0 {
        return Err(Error::Allocation("no clients".into()));
    }
    let minor = classes - maj;
    let (lo, hi) = MAJORITY_RANGE;
    // The minority remainder 1 - Σ majority must fit minor entries in [floor, cap).
    let need_low = 1.0 - minor as f64 * MINORITY_CAP;
    let need_high = 1.0 - minor as f64 * MINORITY_FLOOR;
    if maj as f64 * lo > need_high || maj as f64 * hi <= need_low {
        return Err(Error::Allocation(format!(
            "{maj} majority classes in [{lo}, {hi}] and {minor} minority classes below \
             {MINORITY_CAP} cannot sum to 1"
        )));
    }

    let mut profiles = Vec::with_capacity(clients);
    for c in 0..clients {
        let majority: Vec<usize> = (0..maj).map(|j| (c * maj + j) % classes).collect();
        let mut shares = None;
        for _ in 0..MAX_ATTEMPTS {
            let major: Vec<f64> = (0..maj).map(|_| rng.random_range(lo..=hi)).collect();
            let rest = 1.0 - major.iter().sum::<f64>();
            if rest < minor as f64 * MINORITY_FLOOR || rest >= minor as f64 * MINORITY_CAP {
                continue;
            }
            shares = Some((major, split_bounded(rest, minor, rng)));
            break;
        }
        let (major, minors) = shares.ok_or_else(|| {
            Error::Allocation(format!("no feasible profile found for client {c}"))
        })?;
        let mut profile = vec![0.0; classes];
        let mut minors = minors.into_iter();
        let mut major = major.into_iter();
        for (k, p) in profile.iter_mut().enumerate() {
            *p = if majority.contains(&k) {
                major.next().expect("one share per majority class")
            } else {
                minors.next().expect("one share per minority class")
            };
        }
        let s: f64 = profile.iter().sum();
        profile.iter_mut().for_each(|p| *p /= s);
        profiles.push(profile);
    }
    Ok(profiles)
}

/// Splits `total` into `n` random parts in `[MINORITY_FLOOR, MINORITY_CAP)`.
/// The caller guarantees `n·floor <= total < n·cap`.
fn split_bounded<R: Rng + ?Sized>(total: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let cap = MINORITY_CAP * (1.0 - 1e-9);
    let mut left = total;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let after = (n - i - 1) as f64;
        if after == 0.0 {
            out.push(left);
            break;
        }
        let low = MINORITY_FLOOR.max(left - after * cap);
        let high = cap.min(left - after * MINORITY_FLOOR);
        let v = if high > low { rng.random_range(low..high) } else { low };
        out.push(v);
        left -= v;
    }
    out
}
