//! Static world description: gravity, anchors, terrain patches, payloads.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Rectangle `origin + a·u + b·v`, `a, b ∈ [0, 1]`, solid on the side
/// opposite its normal `u × v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainPatch {
    #[serde(default)]
    pub name: String,
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    0.8
}

/// Closest-point query result against one patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchContact {
    pub point: Vec3,
    /// Unit normal pointing out of the terrain, toward the query.
    pub normal: Vec3,
    pub penetration: f64,
}

impl TerrainPatch {
    pub fn new(origin: Vec3, u: Vec3, v: Vec3, mu: f64) -> Self {
        Self {
            name: String::new(),
            origin,
            u,
            v,
            mu,
        }
    }

    /// Horizontal rectangle at height `z` spanning `[x0, x1] × [y0, y1]`.
    pub fn horizontal(x: [f64; 2], y: [f64; 2], z: f64, mu: f64) -> Self {
        Self::new(
            Vec3::new(x[0], y[0], z),
            Vec3::new(x[1] - x[0], 0.0, 0.0),
            Vec3::new(0.0, y[1] - y[0], 0.0),
            mu,
        )
    }

    pub fn normal(&self) -> Vec3 {
        self.u.cross(&self.v).normalize()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.u.cross(&self.v).norm();
        n.is_finite() && n > 1e-12 && self.mu >= 0.0 && self.mu.is_finite()
    }

    fn local(&self, p: &Vec3) -> (f64, f64) {
        let d = p - self.origin;
        (
            d.dot(&self.u) / self.u.norm_squared(),
            d.dot(&self.v) / self.v.norm_squared(),
        )
    }

    fn closest_point(&self, p: &Vec3) -> (Vec3, bool) {
        let (a, b) = self.local(p);
        let inside = (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b);
        (
            self.origin + self.u * a.clamp(0.0, 1.0) + self.v * b.clamp(0.0, 1.0),
            inside,
        )
    }

    /// Sphere of radius `radius` centered at `c`. Points deeper than `depth`
    /// behind the face are ignored so thin walls stay one-sided.
    pub fn sphere_contact(&self, c: &Vec3, radius: f64, depth: f64) -> Option<PatchContact> {
        let n = self.normal();
        let (q, inside) = self.closest_point(c);
        let height = (c - q).dot(&n);
        if inside {
            let penetration = radius - height;
            return (penetration > 0.0 && height > -depth).then_some(PatchContact {
                point: c - n * height,
                normal: n,
                penetration,
            });
        }
        if height < 0.0 {
            return None;
        }
        // Edge or corner of the rectangle.
        let d = c - q;
        let dist = d.norm();
        if dist >= radius || dist < 1e-12 {
            return None;
        }
        Some(PatchContact {
            point: q,
            normal: d / dist,
            penetration: radius - dist,
        })
    }

    pub fn point_contact(&self, p: &Vec3, depth: f64) -> Option<PatchContact> {
        let n = self.normal();
        let (q, inside) = self.closest_point(p);
        let height = (p - q).dot(&n);
        (inside && height < 0.0 && height > -depth).then_some(PatchContact {
            point: *p,
            normal: n,
            penetration: -height,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadSpec {
    #[serde(default)]
    pub name: String,
    pub mass: f64,
    pub radius: f64,
    /// Initial center, world frame.
    pub position: Vec3,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldModel {
    pub gravity: Vec3,
    /// Named anchor points wires can be attached to.
    pub anchors: Vec<Vec3>,
    pub terrain: Vec<TerrainPatch>,
    pub payloads: Vec<PayloadSpec>,
}

impl Default for WorldModel {
    fn default() -> Self {
        Self {
            gravity: Vec3::new(0.0, 0.0, -9.81),
            anchors: Vec::new(),
            terrain: Vec::new(),
            payloads: Vec::new(),
        }
    }
}

impl WorldModel {
    pub fn validate(&self) -> Result<(), String> {
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err("gravity must be finite".into());
        }
        for (i, p) in self.terrain.iter().enumerate() {
            if !p.is_valid() {
                return Err(format!(
                    "terrain patch {i} is degenerate or has negative friction"
                ));
            }
        }
        for (i, p) in self.payloads.iter().enumerate() {
            if !(p.mass > 0.0 && p.radius > 0.0) {
                return Err(format!("payload {i} needs positive mass and radius"));
            }
        }
        Ok(())
    }

    /// Deepest contact of a sphere with the terrain, with coincident contacts
    /// from neighbouring patches merged.
    pub fn sphere_contacts(&self, c: &Vec3, radius: f64, depth: f64) -> Vec<(usize, PatchContact)> {
        let hits = self
            .terrain
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.sphere_contact(c, radius, depth).map(|h| (i, h)));
        dedupe(hits)
    }

    pub fn point_contacts(&self, p: &Vec3, depth: f64) -> Vec<(usize, PatchContact)> {
        let hits = self
            .terrain
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.point_contact(p, depth).map(|h| (i, h)));
        // A point inside two solids (a corner) resolves along the shallower face.
        let mut all: Vec<_> = hits.collect();
        if all.len() > 1 {
            all.sort_by(|a, b| a.1.penetration.total_cmp(&b.1.penetration));
            all.truncate(1);
        }
        all
    }
}

fn dedupe(hits: impl Iterator<Item = (usize, PatchContact)>) -> Vec<(usize, PatchContact)> {
    let mut out: Vec<(usize, PatchContact)> = Vec::new();
    for (i, h) in hits {
        match out
            .iter_mut()
            .find(|(_, o)| (o.point - h.point).norm() < 1e-6)
        {
            Some(existing) => {
                if h.penetration > existing.1.penetration {
                    *existing = (i, h);
                }
            }
            None => out.push((i, h)),
        }
    }
    out
}
