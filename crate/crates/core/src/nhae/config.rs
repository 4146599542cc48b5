use crate::error::{Error, Result};

/// Image, latent and window geometry shared by every stage of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeConfig {
    /// Latent channel count `c`.
    pub channels: usize,
    /// Image shape `(D, H, W)`.
    pub image: [usize; 3],
    /// Latent shape `(D', H', W')`.
    pub latent: [usize; 3],
    /// Decoder window length `k`.
    pub window: usize,
}

impl ShapeConfig {
    pub fn desk() -> Self {
        Self {
            channels: 4,
            image: [64; 3],
            latent: [8; 3],
            window: 5,
        }
    }

    pub fn full() -> Self {
        Self {
            channels: 4,
            image: [512; 3],
            latent: [64; 3],
            window: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.image;
        let [ld, lh, lw] = self.latent;
        if self.channels == 0 || self.image.contains(&0) || self.latent.contains(&0) {
            return Err(Error::Config(format!("shape dimensions must be positive: {self:?}")));
        }
        for (axis, full, lat) in [("D", d, ld), ("H", h, lh), ("W", w, lw)] {
            if full % lat != 0 {
                return Err(Error::Config(format!(
                    "{axis}={full} is not an integer multiple of {axis}'={lat}"
                )));
            }
        }
        if h / lh != w / lw || !(h / lh).is_power_of_two() || h / lh < 2 {
            return Err(Error::Config(format!(
                "in-plane factors H/H'={} and W/W'={} must be equal powers of two ≥ 2",
                h / lh,
                w / lw
            )));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window k={} must be odd", self.window)));
        }
        if d < self.window {
            return Err(Error::Config(format!("depth D={d} is shorter than the window k={}", self.window)));
        }
        let thumb = self.thumbnail();
        if (0..3).any(|a| thumb[a] > self.image[a]) {
            return Err(Error::Config(format!(
                "thumbnail {thumb:?} exceeds the image shape {:?}",
                self.image
            )));
        }
        Ok(())
    }

    /// Thumbnail shape `(2D', 2H', 2W')`.
    pub fn thumbnail(&self) -> [usize; 3] {
        self.latent.map(|v| 2 * v)
    }

    pub fn depth_factor(&self) -> usize {
        self.image[0] / self.latent[0]
    }

    /// In-plane upsampling factor `H/H'`.
    pub fn spatial_factor(&self) -> usize {
        self.image[1] / self.latent[1]
    }

    /// Number of ×2 in-plane scales in the slice decoder.
    pub fn levels(&self) -> usize {
        self.spatial_factor().trailing_zeros() as usize
    }

    /// Prime factorization of the depth factor, largest first; one super-resolution
    /// stage per factor.
    pub fn depth_stages(&self) -> Vec<usize> {
        let mut n = self.depth_factor();
        let mut out = Vec::new();
        let mut p = 2;
        while n > 1 {
            while n % p == 0 {
                out.push(p);
                n /= p;
            }
            p += 1;
        }
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Key-value rendering; its hash is the checkpoint fingerprint.
    pub fn describe(&self) -> String {
        let j = |v: [usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "channels={}\nimage={}\nlatent={}\nwindow={}\n",
            self.channels,
            j(self.image),
            j(self.latent),
            self.window
        )
    }

    pub fn latent_elements(&self) -> usize {
        self.channels * self.latent.iter().product::<usize>()
    }
}

/// Channel widths of every NHAE network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NhaeConfig {
    pub shape: ShapeConfig,
    /// Thumbnail encoder widths, one per resolution (first is full thumbnail resolution).
    pub enc3d: Vec<usize>,
    /// Super-resolution widths: input stage followed by one per depth stage.
    pub fsr: Vec<usize>,
    /// Decoder widths from latent resolution up to image resolution.
    pub dec: Vec<usize>,
    /// 2D encoder widths from image resolution down to latent resolution.
    pub enc2d: Vec<usize>,
    pub adaptor_kernel: [usize; 3],
}

impl NhaeConfig {
    /// Default widths for `shape`.
    pub fn for_shape(shape: ShapeConfig) -> Self {
        let levels = shape.levels();
        let dec: Vec<usize> = (0..=levels).map(|l| (32 >> l.saturating_sub(1)).max(8)).collect();
        let enc2d = dec.iter().rev().copied().collect();
        let fsr = (0..=shape.depth_stages().len())
            .map(|j| 32usize.saturating_sub(8 * j).max(16))
            .collect();
        Self {
            shape,
            enc3d: vec![16, 32],
            fsr,
            dec,
            enc2d,
            adaptor_kernel: [3, 3, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let levels = self.shape.levels();
        let check = |name: &str, v: &[usize], n: usize| {
            if v.len() != n || v.contains(&0) {
                Err(Error::Config(format!("{name} needs {n} positive widths, got {v:?}")))
            } else {
                Ok(())
            }
        };
        check("enc3d", &self.enc3d, 2)?;
        check("fsr", &self.fsr, self.shape.depth_stages().len() + 1)?;
        check("dec", &self.dec, levels + 1)?;
        check("enc2d", &self.enc2d, levels + 1)?;
        if self.adaptor_kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "adaptor kernel {:?} must be odd",
                self.adaptor_kernel
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let j = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "{}enc3d={}\nfsr={}\ndec={}\nenc2d={}\nadaptor_kernel={}\n",
            self.shape.describe(),
            j(&self.enc3d),
            j(&self.fsr),
            j(&self.dec),
            j(&self.enc2d),
            j(&self.adaptor_kernel)
        )
    }
}
