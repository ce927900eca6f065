//! Grid road networks, non-detouring route enumeration and random trip demand.
//!
//! Spots are numbered row-major. Directed links are numbered in ascending
//! `(from, to)` order, so the outgoing links of any spot carry consecutive
//! ids sorted by their head spot. Route enumeration walks those links in id
//! order and therefore yields routes in lexicographic link-id order.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, WeightedIndex};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid origin/destination pair {0} -> {1}")]
    InvalidPair(SpotId, SpotId),
    #[error("spot {0} is not part of the network")]
    UnknownSpot(SpotId),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpotId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

impl fmt::Display for SpotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub from: SpotId,
    pub to: SpotId,
    pub length_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    rows: usize,
    cols: usize,
    links: Vec<Link>,
    // outgoing link ids per spot, ascending
    out_links: Vec<Vec<LinkId>>,
}

impl RoadNetwork {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_spots(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn spots(&self) -> impl Iterator<Item = SpotId> {
        (0..self.n_spots()).map(SpotId)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn out_links(&self, spot: SpotId) -> &[LinkId] {
        &self.out_links[spot.0]
    }

    /// `(row, col)` of a spot.
    pub fn position(&self, spot: SpotId) -> (usize, usize) {
        (spot.0 / self.cols, spot.0 % self.cols)
    }

    pub fn manhattan(&self, a: SpotId, b: SpotId) -> usize {
        let (ra, ca) = self.position(a);
        let (rb, cb) = self.position(b);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    }

    pub fn link_between(&self, from: SpotId, to: SpotId) -> Option<LinkId> {
        self.out_links
            .get(from.0)?
            .iter()
            .copied()
            .find(|l| self.links[l.0].to == to)
    }

    fn check_spot(&self, spot: SpotId) -> Result<()> {
        if spot.0 < self.n_spots() {
            Ok(())
        } else {
            Err(NetError::UnknownSpot(spot))
        }
    }
}

/// Builds a `rows × cols` grid with one spot per intersection and a pair of
/// opposing directed links between every two grid-adjacent spots.
pub fn build_grid(rows: usize, cols: usize, link_length_m: f64) -> Result<RoadNetwork> {
    if rows < 2 || cols < 2 {
        return Err(NetError::InvalidConfig(format!(
            "grid must be at least 2x2, got {rows}x{cols}"
        )));
    }
    if !(link_length_m > 0.0 && link_length_m.is_finite()) {
        return Err(NetError::InvalidConfig(format!(
            "link length must be positive, got {link_length_m}"
        )));
    }
    let n = rows * cols;
    let mut links = Vec::with_capacity(2 * (rows * (cols - 1) + cols * (rows - 1)));
    let mut out_links = vec![Vec::new(); n];
    for from in 0..n {
        let (r, c) = (from / cols, from % cols);
        // ascending head id: up, left, right, down
        let mut heads = Vec::with_capacity(4);
        if r > 0 {
            heads.push(from - cols);
        }
        if c > 0 {
            heads.push(from - 1);
        }
        if c + 1 < cols {
            heads.push(from + 1);
        }
        if r + 1 < rows {
            heads.push(from + cols);
        }
        for to in heads {
            let id = LinkId(links.len());
            out_links[from].push(id);
            links.push(Link {
                id,
                from: SpotId(from),
                to: SpotId(to),
                length_m: link_length_m,
            });
        }
    }
    Ok(RoadNetwork {
        rows,
        cols,
        links,
        out_links,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Route {
    pub origin: SpotId,
    pub destination: SpotId,
    pub links: Vec<LinkId>,
}

/// All minimal-hop directed paths from `origin` to `destination`, in
/// lexicographic link-id order, truncated to the first `cap`.
pub fn enumerate_routes(
    network: &RoadNetwork,
    origin: SpotId,
    destination: SpotId,
    cap: usize,
) -> Result<Vec<Route>> {
    network.check_spot(origin)?;
    network.check_spot(destination)?;
    if origin == destination {
        return Err(NetError::InvalidPair(origin, destination));
    }
    if cap == 0 {
        return Err(NetError::InvalidConfig("route cap must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(network.manhattan(origin, destination));
    walk(network, origin, destination, cap, &mut path, &mut out);
    Ok(out)
}

fn walk(
    net: &RoadNetwork,
    at: SpotId,
    dest: SpotId,
    cap: usize,
    path: &mut Vec<LinkId>,
    out: &mut Vec<Route>,
) {
    if out.len() >= cap {
        return;
    }
    if at == dest {
        out.push(Route {
            origin: net.link(path[0]).from,
            destination: dest,
            links: path.clone(),
        });
        return;
    }
    let remaining = net.manhattan(at, dest);
    for &l in net.out_links(at) {
        let next = net.link(l).to;
        // every step must close the distance; such paths never revisit a spot
        if net.manhattan(next, dest) + 1 == remaining {
            path.push(l);
            walk(net, next, dest, cap, path, out);
            path.pop();
        }
    }
}

/// Non-detouring routes for every ordered pair of distinct spots.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteDictionary {
    entries: BTreeMap<(SpotId, SpotId), Vec<Route>>,
}

impl RouteDictionary {
    pub fn get(&self, origin: SpotId, destination: SpotId) -> Option<&[Route]> {
        self.entries.get(&(origin, destination)).map(Vec::as_slice)
    }

    /// Ordered pairs in ascending `(origin, destination)` order.
    pub fn pairs(&self) -> impl Iterator<Item = (SpotId, SpotId)> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(SpotId, SpotId), &Vec<Route>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_routes(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn route(&self, origin: SpotId, destination: SpotId, index: usize) -> Option<&Route> {
        self.get(origin, destination)?.get(index)
    }
}

pub fn build_route_dictionary(network: &RoadNetwork, cap: usize) -> Result<RouteDictionary> {
    let mut entries = BTreeMap::new();
    for o in network.spots() {
        for d in network.spots() {
            if o != d {
                entries.insert((o, d), enumerate_routes(network, o, d, cap)?);
            }
        }
    }
    Ok(RouteDictionary { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub origin: SpotId,
    pub destination: SpotId,
    pub depart_time_s: f64,
    pub route_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripTable {
    pub trips: Vec<Trip>,
    pub period_s: f64,
}

/// How OD pairs are weighted when sampling trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandProfile {
    /// Every ordered pair equally likely.
    Uniform,
    /// Pair weights drawn from a symmetric Dirichlet, then a random subset of
    /// `hotspot_fraction` of the pairs multiplied by `hotspot_boost`.
    Heterogeneous {
        concentration: f64,
        hotspot_fraction: f64,
        hotspot_boost: f64,
    },
}

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile::Heterogeneous {
            concentration: 1.0,
            hotspot_fraction: 0.05,
            hotspot_boost: 10.0,
        }
    }
}

impl DemandProfile {
    pub fn validate(&self) -> Result<()> {
        if let DemandProfile::Heterogeneous {
            concentration,
            hotspot_fraction,
            hotspot_boost,
        } = *self
        {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(NetError::InvalidConfig(format!(
                    "Dirichlet concentration must be positive, got {concentration}"
                )));
            }
            if !(0.0..=1.0).contains(&hotspot_fraction) {
                return Err(NetError::InvalidConfig(format!(
                    "hotspot fraction must lie in [0, 1], got {hotspot_fraction}"
                )));
            }
            if !(hotspot_boost >= 1.0 && hotspot_boost.is_finite()) {
                return Err(NetError::InvalidConfig(format!(
                    "hotspot boost must be >= 1, got {hotspot_boost}"
                )));
            }
        }
        Ok(())
    }

    /// Unnormalized per-pair weights.
    pub fn sample_weights<R: Rng + ?Sized>(&self, n_pairs: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        match *self {
            DemandProfile::Uniform => Ok(vec![1.0; n_pairs]),
            DemandProfile::Heterogeneous {
                concentration,
                hotspot_fraction,
                hotspot_boost,
            } => {
                let gamma = Gamma::new(concentration, 1.0)
                    .map_err(|e| NetError::InvalidConfig(e.to_string()))?;
                let mut w: Vec<f64> = (0..n_pairs).map(|_| gamma.sample(rng)).collect();
                let mut n_hot = (hotspot_fraction * n_pairs as f64).round() as usize;
                if hotspot_fraction > 0.0 {
                    n_hot = n_hot.max(1);
                }
                for i in index::sample(rng, n_pairs, n_hot.min(n_pairs)).into_iter() {
                    w[i] *= hotspot_boost;
                }
                if w.iter().sum::<f64>() <= 0.0 {
                    // every gamma draw underflowed; fall back to uniform
                    w.iter_mut().for_each(|v| *v = 1.0);
                }
                Ok(w)
            }
        }
    }
}

/// Draws `total_trips` trips: pair from the demand profile, route uniform
/// over the pair's dictionary entry, departure uniform over `[0, period_s)`.
pub fn sample_demand(
    dictionary: &RouteDictionary,
    total_trips: usize,
    period_s: f64,
    profile: &DemandProfile,
    seed: u64,
) -> Result<TripTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_demand_with_rng(dictionary, total_trips, period_s, profile, &mut rng)
}

pub fn sample_demand_with_rng<R: Rng + ?Sized>(
    dictionary: &RouteDictionary,
    total_trips: usize,
    period_s: f64,
    profile: &DemandProfile,
    rng: &mut R,
) -> Result<TripTable> {
    if dictionary.is_empty() {
        return Err(NetError::InvalidConfig("route dictionary is empty".into()));
    }
    if !(period_s > 0.0 && period_s.is_finite()) {
        return Err(NetError::InvalidConfig(format!(
            "period must be positive, got {period_s}"
        )));
    }
    let pairs: Vec<(SpotId, SpotId)> = dictionary.pairs().collect();
    let weights = profile.sample_weights(pairs.len(), rng)?;
    let choose =
        WeightedIndex::new(&weights).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
    let mut trips = Vec::with_capacity(total_trips);
    for _ in 0..total_trips {
        let (origin, destination) = pairs[choose.sample(rng)];
        let n_routes = dictionary.get(origin, destination).map_or(0, <[Route]>::len);
        if n_routes == 0 {
            return Err(NetError::InvalidConfig(format!(
                "no routes for {origin} -> {destination}"
            )));
        }
        trips.push(Trip {
            origin,
            destination,
            depart_time_s: rng.gen_range(0.0..period_s),
            route_index: rng.gen_range(0..n_routes),
        });
    }
    Ok(TripTable { trips, period_s })
}
