use serde::{Deserialize, Serialize};

use super::NetsError;

/// Network architecture tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// RGB-only ResNet8 steering regressor.
    Rgbnet,
    /// Three-branch fusion network (RGB, point cloud, distance map).
    Nmfnet,
}

impl Arch {
    pub fn tag(self) -> u8 {
        match self {
            Arch::Rgbnet => 0,
            Arch::Nmfnet => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Arch::Rgbnet),
            1 => Some(Arch::Nmfnet),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rgbnet => "rgbnet",
            Arch::Nmfnet => "nmfnet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgbnet" => Ok(Arch::Rgbnet),
            "nmfnet" => Ok(Arch::Nmfnet),
            other => Err(format!("unknown architecture {other:?} (expected rgbnet or nmfnet)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Input resolutions and layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub rgb_height: usize,
    pub rgb_width: usize,
    pub dmap_height: usize,
    pub dmap_width: usize,
    /// Points fed to the set encoder per sample.
    pub points: usize,
    /// Stem and residual-stage channels; the stem uses the first entry.
    pub widths: [usize; 3],
    /// Hidden widths of the shared per-point MLP.
    pub cloud_hidden: [usize; 2],
    pub cloud_feat: usize,
    /// Output channels of the two 1x1 fusion convolutions.
    pub fusion: [usize; 2],
    pub dropout: f32,
}

impl Default for NetConfig {
    /// Desk scale: a tenth of the full-size 480x640 / 320x640 inputs.
    fn default() -> Self {
        Self {
            rgb_height: 48,
            rgb_width: 64,
            dmap_height: 32,
            dmap_width: 64,
            points: 1024,
            widths: [32, 64, 128],
            cloud_hidden: [32, 64],
            cloud_feat: 128,
            fusion: [128, 64],
            dropout: 0.5,
        }
    }
}

impl NetConfig {
    /// Full-size inputs (480x640 RGB, 320x640 distance map, 20480 points).
    pub fn full_scale() -> Self {
        Self {
            rgb_height: 480,
            rgb_width: 640,
            dmap_height: 320,
            dmap_width: 640,
            points: 20480,
            ..Self::default()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            rgb_height: 12,
            rgb_width: 16,
            dmap_height: 8,
            dmap_width: 16,
            points: 16,
            widths: [4, 8, 16],
            cloud_hidden: [4, 8],
            cloud_feat: 16,
            fusion: [16, 8],
            dropout: 0.5,
        }
    }

    pub fn rgb_feat(&self) -> usize {
        self.widths[2]
    }

    pub fn dmap_feat(&self) -> usize {
        self.widths[2]
    }

    pub fn fusion_feat(&self) -> usize {
        self.fusion[1]
    }

    /// Distance-map raster scale: the raster spans 16 m side to side.
    pub fn dmap_pixels_per_meter(&self) -> f64 {
        self.dmap_width as f64 / 16.0
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        let fail = |m: String| Err(NetsError::InvalidConfig(m));
        if self.rgb_height == 0 || self.rgb_height * 4 != self.rgb_width * 3 {
            return fail(format!(
                "rgb input {}x{} must keep the 480:640 aspect ratio",
                self.rgb_height, self.rgb_width
            ));
        }
        if self.dmap_height == 0 || self.dmap_height * 2 != self.dmap_width {
            return fail(format!(
                "distance map {}x{} must keep the 320:640 aspect ratio",
                self.dmap_height, self.dmap_width
            ));
        }
        if self.points == 0 {
            return fail("point count must be at least 1".into());
        }
        if self.widths.iter().chain(&self.cloud_hidden).chain(&self.fusion).any(|&w| w == 0) || self.cloud_feat == 0 {
            return fail("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        NetConfig::default().validate().unwrap();
        NetConfig::full_scale().validate().unwrap();
        NetConfig::tiny().validate().unwrap();
    }

    #[test]
    fn aspect_ratio_enforced() {
        let cfg = NetConfig {
            rgb_height: 48,
            rgb_width: 48,
            ..NetConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = NetConfig {
            points: 0,
            ..NetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn arch_tags_round_trip() {
        for a in [Arch::Rgbnet, Arch::Nmfnet] {
            assert_eq!(Arch::from_tag(a.tag()), Some(a));
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert_eq!(Arch::from_tag(7), None);
    }
}
