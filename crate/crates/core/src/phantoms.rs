//! Ground-truth basis images: ellipse phantoms and random Gaussian arrays.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::BasisImageSet;
use crate::geometry::ImageGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    #[serde(default)]
    pub rotation: f64,
    /// Additive density per material.
    pub densities: Vec<f64>,
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes[0];
        let v = (-dx * s + dy * c) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }
}

fn default_materials() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_materials")]
    pub materials: usize,
    #[serde(default)]
    pub ellipses: Vec<EllipseSpec>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.materials == 0 {
            return Err(Error::InvalidParameter("phantom needs at least one material".into()));
        }
        for (k, e) in self.ellipses.iter().enumerate() {
            if !(e.semi_axes[0] > 0.0 && e.semi_axes[1] > 0.0) {
                return Err(Error::InvalidParameter(format!("ellipse {k}: semi-axes must be positive")));
            }
            if e.densities.len() != self.materials {
                return Err(Error::InvalidParameter(format!(
                    "ellipse {k}: {} densities for {} materials",
                    e.densities.len(),
                    self.materials
                )));
            }
            let finite = e.center.iter().chain(&e.densities).all(|v| v.is_finite()) && e.rotation.is_finite();
            if !finite {
                return Err(Error::InvalidParameter(format!("ellipse {k}: non-finite parameter")));
            }
        }
        Ok(())
    }
}

/// Sum of the densities of every ellipse containing each pixel center,
/// clamped to [0, 1].
pub fn rasterize(spec: &PhantomSpec, grid: &ImageGrid) -> Result<BasisImageSet> {
    spec.validate()?;
    let n = grid.n_pixels();
    let mut images = vec![vec![0.0; n]; spec.materials];
    for i in 0..n {
        let (x, y) = grid.pixel_center(i);
        for e in spec.ellipses.iter().filter(|e| e.contains(x, y)) {
            for (img, dens) in images.iter_mut().zip(&e.densities) {
                img[i] += dens;
            }
        }
    }
    for v in images.iter_mut().flatten() {
        *v = v.clamp(0.0, 1.0);
    }
    BasisImageSet::new(grid.clone(), images)
}

/// Skull-like bone annulus around a water interior with a few low-contrast
/// features and three bone inserts, on [-5, 5]^2 cm.
pub fn builtin_forbild_like() -> PhantomSpec {
    toml::from_str(include_str!("../fixtures/forbild_like.toml")).expect("bundled phantom parses")
}

pub fn builtin(name: &str) -> Option<PhantomSpec> {
    match name {
        "forbild_like" => Some(builtin_forbild_like()),
        _ => None,
    }
}

/// Two random basis images, see [`random_truth_with`].
pub fn random_truth(grid: &ImageGrid, seed: u64) -> BasisImageSet {
    random_truth_with(grid, 2, seed)
}

/// Independent standard normals clamped to [-3, 3] and mapped affinely onto [0, 1].
pub fn random_truth_with(grid: &ImageGrid, materials: usize, seed: u64) -> BasisImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..materials)
        .map(|_| {
            (0..grid.n_pixels())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z.clamp(-3.0, 3.0) + 3.0) / 6.0
                })
                .collect()
        })
        .collect();
    BasisImageSet {
        grid: grid.clone(),
        images,
    }
}
