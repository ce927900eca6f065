//! Trip timing, observable matrices and dataset generation.
//!
//! Each trip is turned into a chain of `(link, time slice)` steps. Link
//! traffic counts `F` count route steps per link and slice; the OD matrix
//! `D` counts trips per origin/destination pair over the whole period.

mod store;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::netgen::{
    self, build_grid, build_route_dictionary, DemandProfile, LinkId, NetError, RoadNetwork,
    RouteDictionary, SpotId, Trip, TripTable,
};

pub use store::{load_dataset, save_dataset, DATASET_FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported dataset format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("blob shape mismatch: expected {expected} bytes, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("blob checksum mismatch: manifest {expected}, blob {found}")]
    Checksum { expected: String, found: String },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Per-link travel time `length / speed`, with speed drawn independently for
/// every (trip, link) from a normal truncated at `±truncation_sigmas`, then
/// floored at `speed_floor_mps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TravelTimeModel {
    pub speed_mean_mps: f64,
    pub speed_sd_mps: f64,
    pub truncation_sigmas: f64,
    pub speed_floor_mps: f64,
}

impl Default for TravelTimeModel {
    fn default() -> Self {
        Self {
            speed_mean_mps: 12.0,
            speed_sd_mps: 2.0,
            truncation_sigmas: 3.0,
            speed_floor_mps: 1.0,
        }
    }
}

impl TravelTimeModel {
    pub fn fixed(speed_mps: f64) -> Self {
        Self {
            speed_mean_mps: speed_mps,
            speed_sd_mps: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.speed_mean_mps > 0.0
            && self.speed_mean_mps.is_finite()
            && self.speed_sd_mps >= 0.0
            && self.speed_sd_mps.is_finite()
            && self.truncation_sigmas > 0.0
            && self.speed_floor_mps > 0.0
            && self.speed_floor_mps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!(
                "travel-time model must have positive mean, floor and truncation and nonnegative sd: {self:?}"
            )))
        }
    }

    pub fn sample_speed<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.speed_sd_mps == 0.0 {
            return self.speed_mean_mps.max(self.speed_floor_mps);
        }
        let z = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= self.truncation_sigmas {
                break z;
            }
        };
        (self.speed_mean_mps + self.speed_sd_mps * z).max(self.speed_floor_mps)
    }

    pub fn sample_travel_time<R: Rng + ?Sized>(&self, length_m: f64, rng: &mut R) -> f64 {
        length_m / self.sample_speed(rng)
    }
}

/// A route chain: the links a trip group traversed, each tagged with the
/// time slice in which it was entered.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimedRoute {
    pub origin: SpotId,
    pub destination: SpotId,
    pub steps: Vec<(LinkId, usize)>,
    pub trip_count: u64,
}

/// Times one trip along its dictionary route. A link is tagged with the
/// slice containing its entry time; links entered at or after the end of
/// the observation window (`n_t · slice_s`) are dropped.
pub fn timestamp_route<R: Rng + ?Sized>(
    trip: &Trip,
    network: &RoadNetwork,
    dictionary: &RouteDictionary,
    travel: &TravelTimeModel,
    n_t: usize,
    slice_s: f64,
    rng: &mut R,
) -> Result<TimedRoute> {
    travel.validate()?;
    if !(slice_s > 0.0 && slice_s.is_finite()) || n_t == 0 {
        return Err(SimError::InvalidConfig(format!(
            "need n_t >= 1 and slice_s > 0, got n_t={n_t}, slice_s={slice_s}"
        )));
    }
    let route = dictionary
        .route(trip.origin, trip.destination, trip.route_index)
        .ok_or(SimError::Index {
            what: "route",
            index: trip.route_index,
            bound: dictionary
                .get(trip.origin, trip.destination)
                .map_or(0, <[_]>::len),
        })?;
    let window = n_t as f64 * slice_s;
    let mut entry = trip.depart_time_s;
    let mut steps = Vec::with_capacity(route.links.len());
    for &link in &route.links {
        if entry >= window {
            break;
        }
        let slice = ((entry / slice_s).floor() as usize).min(n_t - 1);
        steps.push((link, slice));
        entry += travel.sample_travel_time(network.link(link).length_m, rng);
    }
    Ok(TimedRoute {
        origin: trip.origin,
        destination: trip.destination,
        steps,
        trip_count: 1,
    })
}

/// Merges identical chains, summing their trip counts. Output is sorted.
pub fn route_distribution(routes: impl IntoIterator<Item = TimedRoute>) -> Vec<TimedRoute> {
    let mut merged: BTreeMap<(SpotId, SpotId, Vec<(LinkId, usize)>), u64> = BTreeMap::new();
    for r in routes {
        *merged.entry((r.origin, r.destination, r.steps)).or_insert(0) += r.trip_count;
    }
    merged
        .into_iter()
        .map(|((origin, destination, steps), trip_count)| TimedRoute {
            origin,
            destination,
            steps,
            trip_count,
        })
        .collect()
}

/// Link traffic counts `F`, `n_l × n_t`, row-major by link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficCounts {
    n_l: usize,
    n_t: usize,
    values: Vec<f64>,
}

impl TrafficCounts {
    pub fn zeros(n_l: usize, n_t: usize) -> Self {
        Self {
            n_l,
            n_t,
            values: vec![0.0; n_l * n_t],
        }
    }

    pub fn from_values(n_l: usize, n_t: usize, values: Vec<f64>) -> Result<Self> {
        check_values("traffic counts", n_l * n_t, &values)?;
        Ok(Self { n_l, n_t, values })
    }

    pub fn n_links(&self) -> usize {
        self.n_l
    }

    pub fn n_slices(&self) -> usize {
        self.n_t
    }

    pub fn get(&self, link: usize, slice: usize) -> f64 {
        self.values[link * self.n_t + slice]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// OD matrix `D`, `n_p × n_p`, row = origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    n_p: usize,
    values: Vec<f64>,
}

impl OdMatrix {
    pub fn zeros(n_p: usize) -> Self {
        Self {
            n_p,
            values: vec![0.0; n_p * n_p],
        }
    }

    pub fn from_values(n_p: usize, values: Vec<f64>) -> Result<Self> {
        check_values("OD matrix", n_p * n_p, &values)?;
        Ok(Self { n_p, values })
    }

    pub fn n_spots(&self) -> usize {
        self.n_p
    }

    pub fn get(&self, origin: usize, destination: usize) -> f64 {
        self.values[origin * self.n_p + destination]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn check_values(what: &str, len: usize, values: &[f64]) -> Result<()> {
    if values.len() != len {
        return Err(SimError::InvalidConfig(format!(
            "{what}: expected {len} values, got {}",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(SimError::InvalidConfig(format!(
            "{what}: entries must be finite and nonnegative, found {v}"
        )));
    }
    Ok(())
}

/// `F(i, j) = Σ trip_count` over all chains containing step `(l_i, t_j)`.
pub fn accumulate_counts(routes: &[TimedRoute], n_l: usize, n_t: usize) -> Result<TrafficCounts> {
    let mut acc = vec![0u64; n_l * n_t];
    for r in routes {
        for &(link, slice) in &r.steps {
            if link.0 >= n_l {
                return Err(SimError::Index {
                    what: "link",
                    index: link.0,
                    bound: n_l,
                });
            }
            if slice >= n_t {
                return Err(SimError::Index {
                    what: "time slice",
                    index: slice,
                    bound: n_t,
                });
            }
            acc[link.0 * n_t + slice] += r.trip_count;
        }
    }
    Ok(TrafficCounts {
        n_l,
        n_t,
        values: acc.into_iter().map(|c| c as f64).collect(),
    })
}

/// `D(i, j) = Σ trip_count` over chains from `P_i` to `P_j`.
pub fn accumulate_od(routes: &[TimedRoute], n_p: usize) -> Result<OdMatrix> {
    let mut acc = vec![0u64; n_p * n_p];
    for r in routes {
        for spot in [r.origin, r.destination] {
            if spot.0 >= n_p {
                return Err(SimError::Index {
                    what: "spot",
                    index: spot.0,
                    bound: n_p,
                });
            }
        }
        acc[r.origin.0 * n_p + r.destination.0] += r.trip_count;
    }
    Ok(OdMatrix {
        n_p,
        values: acc.into_iter().map(|c| c as f64).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub rows: usize,
    pub cols: usize,
    pub link_length_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            rows: 6,
            cols: 6,
            link_length_m: 2000.0,
        }
    }
}

impl NetworkConfig {
    pub fn build(&self) -> Result<RoadNetwork> {
        Ok(build_grid(self.rows, self.cols, self.link_length_m)?)
    }

    pub fn n_spots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_links(&self) -> usize {
        2 * (self.rows * self.cols.saturating_sub(1) + self.cols * self.rows.saturating_sub(1))
    }
}

/// Everything that determines a generated dataset apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub network: NetworkConfig,
    pub n_items: usize,
    pub n_t: usize,
    pub slice_s: f64,
    /// Departures are drawn uniformly over `[0, period_s)`.
    pub period_s: f64,
    pub trips_min: usize,
    pub trips_max: usize,
    pub route_cap: usize,
    pub train_fraction: f64,
    pub demand: DemandProfile,
    pub travel: TravelTimeModel,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            n_items: 12_292,
            n_t: 12,
            slice_s: 300.0,
            period_s: 3600.0,
            trips_min: 20_000,
            trips_max: 30_000,
            route_cap: 256,
            train_fraction: 0.8,
            demand: DemandProfile::default(),
            travel: TravelTimeModel::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.network.rows < 2 || self.network.cols < 2 {
            return bad(format!(
                "network must be at least 2x2, got {}x{}",
                self.network.rows, self.network.cols
            ));
        }
        if self.n_t == 0 || !(self.slice_s > 0.0) || !(self.period_s > 0.0) {
            return bad("n_t, slice_s and period_s must be positive".into());
        }
        if self.trips_min > self.trips_max {
            return bad(format!(
                "trips_min ({}) exceeds trips_max ({})",
                self.trips_min, self.trips_max
            ));
        }
        if self.route_cap == 0 {
            return bad("route_cap must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            ));
        }
        self.demand.validate()?;
        self.travel.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub counts: TrafficCounts,
    pub od: OdMatrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    /// The first `n − ⌊(1 − train_fraction)·n⌋` items train, the rest validate.
    pub fn contiguous(n_items: usize, train_fraction: f64) -> Self {
        let n_val = (((1.0 - train_fraction) * n_items as f64) + 1e-9).floor() as usize;
        let n_val = n_val.min(n_items);
        let n_train = n_items - n_val;
        Self {
            train: (0..n_train).collect(),
            validation: (n_train..n_items).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config: SimConfig,
    pub n_l: usize,
    pub n_t: usize,
    pub n_p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub split: Split,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn train_items(&self) -> impl Iterator<Item = &DataItem> {
        self.split.train.iter().map(|&i| &self.items[i])
    }

    pub fn validation_items(&self) -> impl Iterator<Item = &DataItem> {
        self.split.validation.iter().map(|&i| &self.items[i])
    }
}

/// One simulated item with the intermediate trip table and route chains.
#[derive(Debug, Clone)]
pub struct SimulatedItem {
    pub trips: TripTable,
    pub routes: Vec<TimedRoute>,
    pub item: DataItem,
}

/// Per-item sub-seeds, drawn in order from a generator seeded with `seed`.
pub fn item_seeds(seed: u64, n_items: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_items).map(|_| rng.next_u64()).collect()
}

pub fn simulate_item(
    network: &RoadNetwork,
    dictionary: &RouteDictionary,
    config: &SimConfig,
    item_seed: u64,
) -> Result<SimulatedItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let n_trips = rng.gen_range(config.trips_min..=config.trips_max);
    let trips = netgen::sample_demand_with_rng(
        dictionary,
        n_trips,
        config.period_s,
        &config.demand,
        &mut rng,
    )?;
    let timed = trips
        .trips
        .iter()
        .map(|t| {
            timestamp_route(
                t,
                network,
                dictionary,
                &config.travel,
                config.n_t,
                config.slice_s,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let routes = route_distribution(timed);
    let counts = accumulate_counts(&routes, network.n_links(), config.n_t)?;
    let od = accumulate_od(&routes, network.n_spots())?;
    Ok(SimulatedItem {
        trips,
        routes,
        item: DataItem { counts, od },
    })
}

/// Generates `config.n_items` independent items. Items are simulated in
/// parallel; the result depends only on `(config, seed)`.
pub fn generate_dataset(config: &SimConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let network = config.network.build()?;
    let dictionary = build_route_dictionary(&network, config.route_cap)?;
    let items = item_seeds(seed, config.n_items)
        .into_par_iter()
        .map(|s| simulate_item(&network, &dictionary, config, s).map(|sim| sim.item))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split: Split::contiguous(items.len(), config.train_fraction),
        items,
        meta: DatasetMeta {
            seed,
            config: config.clone(),
            n_l: network.n_links(),
            n_t: config.n_t,
            n_p: network.n_spots(),
        },
    })
}
