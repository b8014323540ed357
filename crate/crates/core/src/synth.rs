//! Synthetic worlds with visual aliasing.
//!
//! A world is a set of square *regions* (blocks of square cells), either
//! stacked on several floors or laid out on a street grid. Every cell has a
//! random appearance embedding; regions that share an appearance layout look
//! alike, so only side information separates them. Appearance extends one
//! view radius past the walkable area of a region.
//!
//! Images come from random-walk sessions inside one region. An image
//! descriptor sums the cell embeddings over its view sector, so descriptor
//! similarity roughly follows view overlap, then adds a per-session condition
//! offset and isotropic noise.
//! Radio endpoints sit inside each region and are observed with free-space
//! path loss, an optional per-floor attenuation and Gaussian noise.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Record, Split, RELEVANCE_THRESHOLD};
use crate::geometry::{fov_overlap, FovConfig, Pose};
use crate::radio::{rssi_at, EndpointRegistry, RadioReading};
use crate::tensor::Tensor2;
use crate::{Error, Result};

/// Camera height above the floor, meters.
const CAMERA_HEIGHT: f64 = 1.6;
/// Endpoint height above the floor, meters.
const ENDPOINT_HEIGHT: f64 = 2.5;
/// Distance kept between trajectories and region walls, meters.
const WALL_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `blocks` regions in a row on each of `floors` floors.
    MultiFloor,
    /// `blocks` regions on a square-ish grid of one floor; `floors` must be 1.
    StreetGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub layout: Layout,
    pub cells_per_axis: usize,
    /// Meters.
    pub cell_size: f64,
    pub floors: usize,
    /// Regions per floor.
    pub blocks: usize,
    /// Free space between neighboring regions, meters.
    pub block_gap: f64,
    /// Meters.
    pub floor_height: f64,
    /// Average number of images per cell and region.
    pub images_per_cell: usize,
    pub session_length: usize,
    /// Regions sharing one appearance layout; 1 means no aliasing.
    pub aliasing: usize,
    /// Scale of a per-region appearance perturbation on top of the shared
    /// layout.
    pub alias_jitter: f64,
    pub descriptor_dim: usize,
    /// Standard deviation of per-image descriptor noise, relative to the
    /// unit-norm appearance term.
    pub noise: f64,
    /// Number of capture conditions; each session draws one.
    pub conditions: usize,
    /// Norm of the condition offset.
    pub condition_strength: f64,
    /// Dimension of the subspace the condition offsets live in.
    pub condition_rank: usize,
    pub endpoints_per_region: usize,
    /// dB.
    pub rssi_noise: f64,
    /// Extra attenuation per floor between endpoint and receiver, dB.
    pub floor_loss: f64,
    /// Weakest detectable signal, dBm.
    pub detection_threshold: f64,
    /// MHz.
    pub frequency: f64,
    /// Seconds between radio scans.
    pub scan_interval: f64,
    /// Radio readings within this many seconds are attached to an image.
    pub radio_window: f64,
    /// Fraction of sessions used as queries.
    pub query_fraction: f64,
    /// Fraction of query sessions set aside for validation.
    pub val_fraction: f64,
    /// Field of view used for ground-truth relevance.
    pub fov: FovConfig,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layout: Layout::MultiFloor,
            cells_per_axis: 8,
            cell_size: 2.0,
            floors: 2,
            blocks: 4,
            block_gap: 20.0,
            floor_height: 4.0,
            images_per_cell: 6,
            session_length: 25,
            aliasing: 2,
            alias_jitter: 0.2,
            descriptor_dim: 64,
            noise: 1.2,
            conditions: 4,
            condition_strength: 0.8,
            condition_rank: 4,
            endpoints_per_region: 4,
            rssi_noise: 4.0,
            floor_loss: 15.0,
            detection_threshold: -90.0,
            frequency: 2412.0,
            scan_interval: 2.0,
            radio_window: 10.0,
            query_fraction: 0.12,
            val_fraction: 0.1,
            fov: FovConfig {
                radius: 10.0,
                angle: FRAC_PI_2,
                elevation_gate: Some(3.0),
            },
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn regions(&self) -> usize {
        self.floors * self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(Error::Config(m));
        if self.cells_per_axis == 0 || self.blocks == 0 || self.floors == 0 {
            return err("world needs at least one cell, block and floor".into());
        }
        if self.layout == Layout::StreetGrid && self.floors != 1 {
            return err(format!(
                "street-grid layout has one floor, got {}",
                self.floors
            ));
        }
        if !(self.cell_size > 0.0 && self.block_gap >= 0.0 && self.floor_height > 0.0) {
            return err("world dimensions must be positive".into());
        }
        if self.images_per_cell == 0 || self.session_length == 0 {
            return err("images_per_cell and session_length must be positive".into());
        }
        if self.aliasing == 0 || !self.regions().is_multiple_of(self.aliasing) {
            return err(format!(
                "aliasing {} must divide the region count {}",
                self.aliasing,
                self.regions()
            ));
        }
        if self.descriptor_dim == 0 || self.condition_rank > self.descriptor_dim {
            return err("condition rank exceeds descriptor dimension".into());
        }
        if self.conditions == 0 {
            return err("at least one condition is required".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("alias_jitter", self.alias_jitter),
            ("condition_strength", self.condition_strength),
            ("rssi_noise", self.rssi_noise),
            ("floor_loss", self.floor_loss),
            ("radio_window", self.radio_window),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.frequency > 0.0 && self.scan_interval > 0.0) {
            return err("frequency and scan interval must be positive".into());
        }
        if self.endpoints_per_region > self.cells_per_axis * self.cells_per_axis {
            return err(format!(
                "{} endpoints per region do not fit into {} cells",
                self.endpoints_per_region,
                self.cells_per_axis * self.cells_per_axis
            ));
        }
        for (name, v) in [
            ("query_fraction", self.query_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        self.fov.validate()
    }

    fn block_side(&self) -> f64 {
        self.cells_per_axis as f64 * self.cell_size
    }

    /// Lower-left corner and floor of region `r`.
    fn region_origin(&self, r: usize) -> (f64, f64, usize) {
        let pitch = self.block_side() + self.block_gap;
        let (floor, b) = (r / self.blocks, r % self.blocks);
        match self.layout {
            Layout::MultiFloor => (b as f64 * pitch, 0.0, floor),
            Layout::StreetGrid => {
                let cols = libm::ceil(libm::sqrt(self.blocks as f64)) as usize;
                ((b % cols) as f64 * pitch, (b / cols) as f64 * pitch, floor)
            }
        }
    }

    /// Cells of appearance surrounding each region so that every view
    /// sector stays on the region's own appearance.
    fn apron_cells(&self) -> usize {
        libm::ceil(self.fov.radius / self.cell_size) as usize
    }

    fn floor_z(&self, floor: usize) -> f64 {
        floor as f64 * self.floor_height
    }
}

/// A radio transmitter of the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: u32,
    pub region: u32,
    pub floor: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A generated world.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub dataset: Dataset,
    pub endpoints: Vec<Endpoint>,
    /// Region of every record.
    pub regions: Vec<u32>,
    /// Query and validation records without any relevant database image.
    pub unlabeled: Vec<u32>,
}

impl World {
    pub fn floor_of(&self, id: u32) -> u32 {
        self.config
            .region_origin(self.regions[id as usize] as usize)
            .2 as u32
    }
}

fn gaussian_vec(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Appearance of a region: one vector per cell, apron included.
struct Appearance {
    cells: Vec<Vec<f64>>,
}

/// Rings and rays of the polar grid sampling a view sector.
const VIEW_RINGS: usize = 6;
const VIEW_RAYS: usize = 7;

/// Area-weighted sum of the cell appearances inside the view sector.
fn appearance_term(
    cfg: &WorldConfig,
    app: &Appearance,
    local: (f64, f64),
    heading: f64,
) -> Vec<f64> {
    let apron = cfg.apron_cells();
    let n = cfg.cells_per_axis + 2 * apron;
    let offset = apron as f64 * cfg.cell_size;
    let mut acc = vec![0.0; cfg.descriptor_dim];
    for ring in 0..VIEW_RINGS {
        let rho = (ring as f64 + 0.5) / VIEW_RINGS as f64;
        for ray in 0..VIEW_RAYS {
            let phi = ((ray as f64 + 0.5) / VIEW_RAYS as f64 - 0.5) * cfg.fov.angle;
            let dir = heading + phi;
            let px = (offset + local.0 + rho * cfg.fov.radius * libm::cos(dir)).max(0.0);
            let py = (offset + local.1 + rho * cfg.fov.radius * libm::sin(dir)).max(0.0);
            let cell = ((py / cfg.cell_size) as usize).min(n - 1) * n
                + ((px / cfg.cell_size) as usize).min(n - 1);
            for (a, e) in acc.iter_mut().zip(&app.cells[cell]) {
                *a += rho * e;
            }
        }
    }
    normalize(&mut acc);
    acc
}

struct Session {
    region: usize,
    condition: usize,
    /// Local (x, y, heading) per image.
    track: Vec<(f64, f64, f64)>,
    start: f64,
}

fn random_walk(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let side = cfg.block_side();
    let (lo, hi) = (WALL_MARGIN, side - WALL_MARGIN);
    let mut x = rng.random_range(lo..hi);
    let mut y = rng.random_range(lo..hi);
    let mut h = rng.random_range(-PI..PI);
    let mut track = Vec::with_capacity(cfg.session_length);
    for _ in 0..cfg.session_length {
        track.push((x, y, h));
        let turn: f64 = StandardNormal.sample(rng);
        h += 0.4 * turn;
        let (nx, ny) = (x + libm::cos(h), y + libm::sin(h));
        if (lo..hi).contains(&nx) && (lo..hi).contains(&ny) {
            x = nx;
            y = ny;
        } else {
            h += PI * 0.5 + rng.random_range(0.0..PI);
        }
    }
    track
}

/// Generates a world. Deterministic per configuration (including seed).
pub fn generate(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.descriptor_dim;
    let regions = cfg.regions();
    let cells = cfg.cells_per_axis * cfg.cells_per_axis;
    let face_scale = 1.0 / libm::sqrt(d as f64);

    // appearance: one layout per alias class, plus per-region jitter
    let classes = regions / cfg.aliasing;
    let field = (cfg.cells_per_axis + 2 * cfg.apron_cells()).pow(2);
    let layouts: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            (0..field)
                .map(|_| gaussian_vec(d, face_scale, &mut rng))
                .collect()
        })
        .collect();
    let appearance: Vec<Appearance> = (0..regions)
        .map(|r| Appearance {
            cells: layouts[r % classes]
                .iter()
                .map(|f| {
                    let j = gaussian_vec(d, face_scale * cfg.alias_jitter, &mut rng);
                    f.iter().zip(j).map(|(a, b)| a + b).collect()
                })
                .collect(),
        })
        .collect();

    // capture conditions live in a random low-rank subspace
    let basis: Vec<Vec<f64>> = (0..cfg.condition_rank)
        .map(|_| gaussian_vec(d, 1.0, &mut rng))
        .collect();
    let conditions: Vec<Vec<f64>> = (0..cfg.conditions)
        .map(|_| {
            let mut v = vec![0.0; d];
            if !basis.is_empty() {
                for b in &basis {
                    let c: f64 = StandardNormal.sample(&mut rng);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
                }
                normalize(&mut v);
                v.iter_mut().for_each(|x| *x *= cfg.condition_strength);
            }
            v
        })
        .collect();

    // endpoints at distinct cell centers of each region
    let mut endpoints = Vec::new();
    for r in 0..regions {
        let (ox, oy, floor) = cfg.region_origin(r);
        let mut slots: Vec<usize> = (0..cells).collect();
        slots.shuffle(&mut rng);
        for &s in &slots[..cfg.endpoints_per_region] {
            let (cx, cy) = (s % cfg.cells_per_axis, s / cfg.cells_per_axis);
            endpoints.push(Endpoint {
                id: endpoints.len() as u32,
                region: r as u32,
                floor: floor as u32,
                x: ox + (cx as f64 + 0.5) * cfg.cell_size,
                y: oy + (cy as f64 + 0.5) * cfg.cell_size,
                z: cfg.floor_z(floor) + ENDPOINT_HEIGHT,
            });
        }
    }

    // sessions, assigned to regions round-robin
    let per_region = (cfg.images_per_cell * cells).div_ceil(cfg.session_length);
    let mut sessions = Vec::with_capacity(per_region * regions);
    for i in 0..per_region * regions {
        let track = random_walk(cfg, &mut rng);
        sessions.push(Session {
            region: i % regions,
            condition: rng.random_range(0..cfg.conditions),
            track,
            start: i as f64 * 1000.0,
        });
    }

    // session-level split
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut rng);
    let n_query = libm::round(cfg.query_fraction * sessions.len() as f64) as usize;
    let n_val = if n_query == 0 {
        0
    } else {
        (libm::round(cfg.val_fraction * n_query as f64) as usize).min(n_query)
    };
    let mut split_of = vec![Split::Database; sessions.len()];
    for (rank, &s) in order.iter().enumerate().take(n_query) {
        split_of[s] = if rank < n_val {
            Split::Val
        } else {
            Split::Query
        };
    }

    let mut records = Vec::new();
    let mut region_of = Vec::new();
    let mut descriptors = Vec::new();
    for (sid, s) in sessions.iter().enumerate() {
        let (ox, oy, floor) = cfg.region_origin(s.region);
        let z = cfg.floor_z(floor) + CAMERA_HEIGHT;
        let world_pos = |k: usize| (ox + s.track[k].0, oy + s.track[k].1);

        // radio scans along the session, the first one with the first image
        let duration = s.track.len() as f64 - 1.0;
        let mut scans = Vec::new();
        let mut t = 0.0;
        while t <= duration {
            let k = libm::floor(t) as usize;
            let f = t - k as f64;
            let (x0, y0) = world_pos(k);
            let (x1, y1) = world_pos((k + 1).min(s.track.len() - 1));
            let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            for e in &endpoints {
                let dist = libm::sqrt(
                    (e.x - x) * (e.x - x) + (e.y - y) * (e.y - y) + (e.z - z) * (e.z - z),
                );
                let noise: f64 = StandardNormal.sample(&mut rng);
                let floors_between = (e.floor as f64 - floor as f64).abs();
                let rssi = rssi_at(dist, cfg.frequency) - cfg.floor_loss * floors_between
                    + cfg.rssi_noise * noise;
                if rssi >= cfg.detection_threshold {
                    scans.push(RadioReading {
                        endpoint: e.id,
                        rssi,
                        freq: cfg.frequency,
                        timestamp: s.start + t,
                    });
                }
            }
            t += cfg.scan_interval;
        }

        for (k, &(lx, ly, h)) in s.track.iter().enumerate() {
            let timestamp = s.start + k as f64;
            let split = split_of[sid];
            let past_only = split != Split::Database;
            let radio = scans
                .iter()
                .filter(|r| {
                    let dt = r.timestamp - timestamp;
                    dt.abs() <= cfg.radio_window && !(past_only && dt > 0.0)
                })
                .copied()
                .collect();
            let mut v = appearance_term(cfg, &appearance[s.region], (lx, ly), h);
            let noise = gaussian_vec(d, cfg.noise * face_scale, &mut rng);
            for ((x, c), n) in v.iter_mut().zip(&conditions[s.condition]).zip(noise) {
                *x += c + n;
            }
            normalize(&mut v);
            descriptors.extend(v.into_iter().map(|x| x as f32));
            region_of.push(s.region as u32);
            records.push(Record {
                id: records.len() as u32,
                split,
                session: sid as u32,
                pose: Some(Pose::new(ox + lx, oy + ly, z, h)),
                timestamp,
                radio,
            });
        }
    }

    // ground truth: view overlap above the threshold and same floor
    let database: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split == Split::Database)
        .collect();
    let mut labels = BTreeMap::new();
    let mut unlabeled = Vec::new();
    for q in records.iter().filter(|r| r.split != Split::Database) {
        let qp = q.pose.expect("generated records have poses");
        let qf = cfg.region_origin(region_of[q.id as usize] as usize).2;
        let rel: BTreeSet<u32> = database
            .iter()
            .filter(|&&i| cfg.region_origin(region_of[i] as usize).2 == qf)
            .filter(|&&i| {
                fov_overlap(&qp, &records[i].pose.expect("pose"), &cfg.fov) > RELEVANCE_THRESHOLD
            })
            .map(|&i| i as u32)
            .collect();
        if rel.is_empty() {
            unlabeled.push(q.id);
        }
        labels.insert(q.id, rel);
    }
    if !unlabeled.is_empty() {
        log::info!(
            "{} query images have no relevant database image",
            unlabeled.len()
        );
    }

    let dataset = Dataset {
        descriptors: Tensor2::from_vec(records.len(), d, descriptors)?,
        registry: EndpointRegistry::from_ids(endpoints.iter().map(|e| e.id)),
        records,
        labels,
    };
    dataset.validate()?;
    Ok(World {
        config: cfg.clone(),
        dataset,
        endpoints,
        regions: region_of,
        unlabeled,
    })
}
