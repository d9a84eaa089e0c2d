//! Network topologies and controller-to-controller delay matrices.
//!
//! Topology files are plain text, one record per line, `#` starts a comment:
//!
//! ```text
//! speed_km_s 200000          # optional propagation speed
//! node SEA 47.6062 -122.3321 # id, optional latitude/longitude in degrees
//! node S1                    # node without coordinates
//! link SEA PDX geo           # haversine distance between the endpoints
//! link A B km 1000           # explicit distance
//! link A B us 5000           # explicit one-way delay
//! link A B uniform 500 1500  # delay drawn uniformly (µs) when the matrix is built
//! place SEA                  # next controller replica hosted on node SEA
//! weights 1 1 2 1 5          # optional default request weights per replica
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ReplicaId, SimError};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_SPEED_KM_S: f64 = 2.0e5;

const INTERNET2: &str = include_str!("../../topologies/internet2.topo");
const FAT_TREE: &str = include_str!("../../topologies/fattree.topo");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub coords: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinkSpec {
    /// Great-circle distance between endpoint coordinates.
    Geo,
    DistanceKm(f64),
    DelayMicros(u64),
    Uniform {
        lo_us: u64,
        hi_us: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub spec: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub placement: Vec<String>,
    pub propagation_speed_km_s: f64,
    pub default_weights: Option<Vec<u32>>,
}

/// One-way delays between every ordered pair of controller replicas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayMatrix {
    delays: Vec<Vec<u64>>,
}

/// Knobs applied when converting a topology into a delay matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayParams {
    /// Overrides the topology's own speed when set.
    pub speed_km_s: Option<f64>,
    pub local_loop_us: u64,
    /// Multiplies every inter-replica delay.
    pub scale: f64,
}

impl Default for DelayParams {
    fn default() -> Self {
        Self {
            speed_km_s: None,
            local_loop_us: 10,
            scale: 1.0,
        }
    }
}

pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn km_to_us(km: f64, speed_km_s: f64) -> u64 {
    ((km / speed_km_s) * 1e6).round().max(1.0) as u64
}

impl Topology {
    pub fn parse(name: &str, text: &str) -> Result<Self, SimError> {
        let mut topo = Topology {
            name: name.to_string(),
            nodes: Vec::new(),
            links: Vec::new(),
            placement: Vec::new(),
            propagation_speed_km_s: DEFAULT_SPEED_KM_S,
            default_weights: None,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SimError::TopologyParse { line: line_no, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("not a number: {s:?}")))
            };
            let int = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(format!("not an integer: {s:?}")))
            };
            match fields.as_slice() {
                ["speed_km_s", v] => topo.propagation_speed_km_s = num(v)?,
                ["node", id] => topo.nodes.push(Node {
                    id: id.to_string(),
                    coords: None,
                }),
                ["node", id, lat, lon] => topo.nodes.push(Node {
                    id: id.to_string(),
                    coords: Some((num(lat)?, num(lon)?)),
                }),
                ["link", a, b, rest @ ..] => {
                    let spec = match rest {
                        ["geo"] => LinkSpec::Geo,
                        ["km", d] => LinkSpec::DistanceKm(num(d)?),
                        ["us", d] => LinkSpec::DelayMicros(int(d)?),
                        ["uniform", lo, hi] => LinkSpec::Uniform {
                            lo_us: int(lo)?,
                            hi_us: int(hi)?,
                        },
                        _ => return Err(err(format!("bad link spec: {line}"))),
                    };
                    topo.links.push(Link {
                        a: a.to_string(),
                        b: b.to_string(),
                        spec,
                    });
                }
                ["place", id] => topo.placement.push(id.to_string()),
                ["weights", ws @ ..] if !ws.is_empty() => {
                    let ws = ws
                        .iter()
                        .map(|w| int(w).map(|v| v as u32))
                        .collect::<Result<Vec<_>, _>>()?;
                    topo.default_weights = Some(ws);
                }
                _ => return Err(err(format!("unrecognized record: {line}"))),
            }
        }
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Topology(format!("{}: {e}", path.display())))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom");
        Self::parse(name, &text)
    }

    /// `internet2`, `fattree`, or a path to a topology file.
    pub fn resolve(name_or_path: &str) -> Result<Self, SimError> {
        match name_or_path {
            "internet2" => Self::internet2(),
            "fattree" | "fat-tree" => Self::fat_tree(),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn internet2() -> Result<Self, SimError> {
        Self::parse("internet2", INTERNET2)
    }

    pub fn fat_tree() -> Result<Self, SimError> {
        Self::parse("fattree", FAT_TREE)
    }

    /// Host the controller replicas on `placement` instead of the file's list.
    pub fn with_placement(mut self, placement: Vec<String>) -> Result<Self, SimError> {
        if self
            .default_weights
            .as_ref()
            .is_some_and(|w| w.len() != placement.len())
        {
            self.default_weights = None;
        }
        self.placement = placement;
        self.validate()?;
        Ok(self)
    }

    pub fn replica_count(&self) -> usize {
        self.placement.len()
    }

    fn node_index(&self) -> BTreeMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    fn validate(&self) -> Result<(), SimError> {
        let index = self.node_index();
        if index.len() != self.nodes.len() {
            return Err(SimError::Topology("duplicate node id".into()));
        }
        if self.propagation_speed_km_s.is_nan() || self.propagation_speed_km_s <= 0.0 {
            return Err(SimError::Topology(
                "propagation speed must be positive".into(),
            ));
        }
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !index.contains_key(end.as_str()) {
                    return Err(SimError::Topology(format!(
                        "link endpoint {end} is not a node"
                    )));
                }
            }
            match l.spec {
                LinkSpec::Geo => {
                    if self.nodes[index[l.a.as_str()]].coords.is_none()
                        || self.nodes[index[l.b.as_str()]].coords.is_none()
                    {
                        return Err(SimError::Topology(format!(
                            "geo link {}-{} needs coordinates",
                            l.a, l.b
                        )));
                    }
                }
                LinkSpec::DistanceKm(d) if d.is_nan() || d <= 0.0 => {
                    return Err(SimError::Topology(format!(
                        "link {}-{} has non-positive distance",
                        l.a, l.b
                    )));
                }
                LinkSpec::DelayMicros(0) => {
                    return Err(SimError::Topology(format!(
                        "link {}-{} has zero delay",
                        l.a, l.b
                    )));
                }
                LinkSpec::Uniform { lo_us, hi_us } if lo_us == 0 || lo_us > hi_us => {
                    return Err(SimError::Topology(format!(
                        "link {}-{} has a bad delay range",
                        l.a, l.b
                    )));
                }
                _ => {}
            }
        }
        if self.placement.is_empty() {
            return Err(SimError::Topology("no controller placement".into()));
        }
        for p in &self.placement {
            if !index.contains_key(p.as_str()) {
                return Err(SimError::Topology(format!(
                    "placement node {p} is not a node"
                )));
            }
        }
        if let Some(ws) = &self.default_weights {
            if ws.len() != self.placement.len() {
                return Err(SimError::Topology(
                    "weights length differs from placement size".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-link one-way delay in µs; uniform links draw from `rng` in file order.
    pub fn link_delays<R: Rng>(&self, speed_km_s: f64, rng: &mut R) -> Vec<u64> {
        let index = self.node_index();
        self.links
            .iter()
            .map(|l| match l.spec {
                LinkSpec::Geo => {
                    let a = self.nodes[index[l.a.as_str()]].coords.expect("validated");
                    let b = self.nodes[index[l.b.as_str()]].coords.expect("validated");
                    km_to_us(haversine_km(a, b), speed_km_s)
                }
                LinkSpec::DistanceKm(d) => km_to_us(d, speed_km_s),
                LinkSpec::DelayMicros(d) => d,
                LinkSpec::Uniform { lo_us, hi_us } => rng.random_range(lo_us..=hi_us),
            })
            .collect()
    }
}

/// All-pairs shortest paths over link delays, restricted to controller placements.
pub fn build_delay_matrix<R: Rng>(
    topo: &Topology,
    params: &DelayParams,
    rng: &mut R,
) -> Result<DelayMatrix, SimError> {
    let speed = params.speed_km_s.unwrap_or(topo.propagation_speed_km_s);
    if speed.is_nan() || speed <= 0.0 || params.scale.is_nan() || params.scale <= 0.0 {
        return Err(SimError::Topology(
            "speed and delay scale must be positive".into(),
        ));
    }
    let index = topo.node_index();
    let n = topo.nodes.len();
    const INF: u64 = u64::MAX / 4;
    let mut dist = vec![vec![INF; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0;
    }
    for (link, d) in topo.links.iter().zip(topo.link_delays(speed, rng)) {
        let (a, b) = (index[link.a.as_str()], index[link.b.as_str()]);
        if d < dist[a][b] {
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if dist[i][k] == INF {
                continue;
            }
            for j in 0..n {
                let via = dist[i][k] + dist[k][j];
                if via < dist[i][j] {
                    dist[i][j] = via;
                }
            }
        }
    }
    let places: Vec<usize> = topo.placement.iter().map(|p| index[p.as_str()]).collect();
    let mut delays = vec![vec![0; places.len()]; places.len()];
    for (i, &a) in places.iter().enumerate() {
        for (j, &b) in places.iter().enumerate() {
            let d = dist[a][b];
            if d == INF {
                return Err(SimError::Disconnected {
                    a: topo.placement[i].clone(),
                    b: topo.placement[j].clone(),
                });
            }
            delays[i][j] = if i == j || d == 0 {
                params.local_loop_us
            } else {
                ((d as f64) * params.scale).round().max(1.0) as u64
            };
        }
    }
    Ok(DelayMatrix { delays })
}

impl DelayMatrix {
    pub fn from_rows(delays: Vec<Vec<u64>>) -> Self {
        Self { delays }
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }

    pub fn get(&self, from: ReplicaId, to: ReplicaId) -> u64 {
        self.delays[from.index()][to.index()]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.delays
    }

    /// Largest one-way delay from `from` to any other replica.
    pub fn max_from(&self, from: ReplicaId) -> u64 {
        self.delays[from.index()]
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != from.index())
            .map(|(_, d)| *d)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn thousand_km_at_fiber_speed() {
        let topo =
            Topology::parse("t", "node A\nnode B\nlink A B km 1000\nplace A\nplace B\n").unwrap();
        let m = build_delay_matrix(&topo, &DelayParams::default(), &mut rng()).unwrap();
        assert_eq!(m.get(ReplicaId(0), ReplicaId(1)), 5000);
        assert_eq!(m.get(ReplicaId(1), ReplicaId(0)), 5000);
        assert_eq!(m.get(ReplicaId(0), ReplicaId(0)), 10);
    }

    #[test]
    fn literal_speed_is_selectable() {
        let topo = Topology::parse(
            "t",
            "speed_km_s 2000000\nnode A\nnode B\nlink A B km 1000\nplace A\nplace B\n",
        )
        .unwrap();
        let m = build_delay_matrix(&topo, &DelayParams::default(), &mut rng()).unwrap();
        assert_eq!(m.get(ReplicaId(0), ReplicaId(1)), 500);
    }

    #[test]
    fn colocated_replicas_use_local_loop() {
        let topo = Topology::parse(
            "t",
            "node A\nnode B\nlink A B us 70\nplace A\nplace A\nplace B\n",
        )
        .unwrap();
        let m = build_delay_matrix(&topo, &DelayParams::default(), &mut rng()).unwrap();
        assert_eq!(m.get(ReplicaId(0), ReplicaId(1)), 10);
        assert_eq!(m.get(ReplicaId(0), ReplicaId(2)), 70);
    }

    #[test]
    fn shortest_path_through_relay() {
        let text = "node A\nnode B\nnode C\nlink A B us 100\nlink B C us 100\nlink A C us 500\nplace A\nplace C\n";
        let m = build_delay_matrix(
            &Topology::parse("t", text).unwrap(),
            &DelayParams::default(),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(m.get(ReplicaId(0), ReplicaId(1)), 200);
    }

    #[test]
    fn scale_multiplies_delays() {
        let topo =
            Topology::parse("t", "node A\nnode B\nlink A B us 300\nplace A\nplace B\n").unwrap();
        let params = DelayParams {
            scale: 2.0,
            ..DelayParams::default()
        };
        let m = build_delay_matrix(&topo, &params, &mut rng()).unwrap();
        assert_eq!(m.get(ReplicaId(0), ReplicaId(1)), 600);
        assert_eq!(m.get(ReplicaId(0), ReplicaId(0)), 10);
    }

    #[test]
    fn disconnected_placement_is_fatal() {
        let topo = Topology::parse("t", "node A\nnode B\nplace A\nplace B\n").unwrap();
        let err = build_delay_matrix(&topo, &DelayParams::default(), &mut rng()).unwrap_err();
        assert!(matches!(err, SimError::Disconnected { .. }));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Topology::parse("t", "node A\n\nlink A B wormhole\n").unwrap_err();
        assert!(
            matches!(err, SimError::TopologyParse { line: 3, .. }),
            "{err:?}"
        );
        assert!(Topology::parse("t", "node A\nlink A Z us 5\nplace A\n").is_err());
        assert!(Topology::parse("t", "node A\nnode B\nlink A B us 0\nplace A\n").is_err());
    }

    #[test]
    fn haversine_matches_known_distance() {
        // one degree of latitude along a meridian
        let d = haversine_km((0.0, 0.0), (1.0, 0.0));
        assert!((d - EARTH_RADIUS_KM.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn bundled_topologies() {
        let i2 = Topology::internet2().unwrap();
        assert_eq!(i2.replica_count(), 5);
        assert_eq!(i2.default_weights.as_deref(), Some(&[1, 1, 2, 1, 5][..]));
        let ft = Topology::fat_tree().unwrap();
        assert_eq!(ft.replica_count(), 4);
        assert_eq!(ft.default_weights.as_deref(), Some(&[1, 2, 2, 5][..]));
        for topo in [i2, ft] {
            let m = build_delay_matrix(&topo, &DelayParams::default(), &mut rng()).unwrap();
            for i in 0..m.len() {
                for j in 0..m.len() {
                    assert!(m.rows()[i][j] > 0);
                    assert_eq!(m.rows()[i][j], m.rows()[j][i]);
                }
            }
        }
    }

    #[test]
    fn fat_tree_links_stay_in_range() {
        let ft = Topology::fat_tree().unwrap();
        let delays = ft.link_delays(DEFAULT_SPEED_KM_S, &mut rng());
        assert!(delays.iter().all(|d| (500..=1500).contains(d)));
        let mean = delays.iter().sum::<u64>() as f64 / delays.len() as f64;
        assert!((800.0..1200.0).contains(&mean), "mean {mean}");
    }
}
