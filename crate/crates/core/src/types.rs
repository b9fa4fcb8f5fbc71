//! Domain types shared across the toolkit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! tensor_newtype {
    ($name:ident, $rank:expr, $what:expr) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            /// Wraps a tensor, rejecting wrong rank and non-finite values.
            pub fn from_tensor(t: Tensor) -> Result<Self> {
                if t.shape().len() != $rank || t.shape().iter().any(|&d| d == 0) {
                    return Err(Error::ShapeMismatch(format!(
                        "{} must have rank {} with positive dims, got {:?}",
                        $what,
                        $rank,
                        t.shape()
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite($what));
                }
                Ok(Self(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn shape(&self) -> &[usize] {
                self.0.shape()
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }
        }
    };
}

tensor_newtype!(ImageTensor, 3, "image");
tensor_newtype!(FeatureMap, 3, "feature map");
tensor_newtype!(LatentCode, 2, "latent code");

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Self::from_tensor(Tensor::new(vec![channels, height, width], data))
    }

    pub fn channels(&self) -> usize {
        self.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.shape()[2]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data().iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Maps an 8-bit value to the `[-1, 1]` pixel convention.
    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(channels, height, width, bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect())
    }

    /// Inverse of [`ImageTensor::from_u8`], with rounding and clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data().iter().map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
    }
}

impl LatentCode {
    pub fn layers(&self) -> usize {
        self.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.shape()[1]
    }

    /// Layers `from..` (zero-based), i.e. the styles consumed after injection at `from`.
    pub fn tail(&self, from: usize) -> Result<LatentCode> {
        if from >= self.layers() {
            return Err(Error::ShapeMismatch(format!("tail from {from} of {} layers", self.layers())));
        }
        let d = self.dim();
        LatentCode::from_tensor(Tensor::new(vec![self.layers() - from, d], self.data()[from * d..].to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestorationScenario {
    Criminal,
    Accomplice,
    BonaFide,
}

impl RestorationScenario {
    pub const ALL: [RestorationScenario; 3] = [Self::Accomplice, Self::Criminal, Self::BonaFide];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Criminal => "criminal",
            Self::Accomplice => "accomplice",
            Self::BonaFide => "bonafide",
        }
    }
}

impl fmt::Display for RestorationScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RestorationScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "criminal" => Ok(Self::Criminal),
            "accomplice" => Ok(Self::Accomplice),
            "bonafide" | "bona_fide" | "bona-fide" => Ok(Self::BonaFide),
            other => Err(Error::Parse(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Which contributor an image depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IdentityRole {
    Accomplice,
    Criminal,
    BonaFide,
}

/// Target identity to restore and the non-target identity present in the
/// trusted reference, if any.
pub fn target_and_nontarget(scenario: RestorationScenario) -> (IdentityRole, Option<IdentityRole>) {
    match scenario {
        RestorationScenario::Accomplice => (IdentityRole::Accomplice, Some(IdentityRole::Criminal)),
        RestorationScenario::Criminal => (IdentityRole::Criminal, Some(IdentityRole::Accomplice)),
        RestorationScenario::BonaFide => (IdentityRole::BonaFide, None),
    }
}

#[derive(Clone, Debug)]
pub struct DocumentPair {
    pub doc: ImageTensor,
    pub reference: ImageTensor,
    pub gt: Option<ImageTensor>,
    pub scenario: RestorationScenario,
    pub pair_id: String,
    pub morph_method: Option<String>,
}

/// Checks shared shape, square crops and the `[-1, 1]` range. With
/// `require_gt`, a missing ground truth is an error.
pub fn validate_pair(pair: DocumentPair, require_gt: bool) -> Result<DocumentPair> {
    let shape = pair.doc.shape();
    if pair.reference.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "pair {}: doc {:?} vs ref {:?}",
            pair.pair_id,
            shape,
            pair.reference.shape()
        )));
    }
    if let Some(gt) = &pair.gt {
        if gt.shape() != shape {
            return Err(Error::ShapeMismatch(format!("pair {}: doc {:?} vs gt {:?}", pair.pair_id, shape, gt.shape())));
        }
    }
    if shape[1] != shape[2] {
        return Err(Error::ShapeMismatch(format!("pair {}: non-square crop {:?}", pair.pair_id, shape)));
    }
    for (name, img) in [("doc", Some(&pair.doc)), ("ref", Some(&pair.reference)), ("gt", pair.gt.as_ref())] {
        if let Some(img) = img {
            if let Some(v) = img.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::RangeError(format!("pair {}: {name} pixel {v} outside [-1, 1]", pair.pair_id)));
            }
        }
    }
    if require_gt && pair.gt.is_none() {
        return Err(Error::MissingGroundTruth(pair.pair_id));
    }
    Ok(pair)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLabel {
    BonaFide,
    Morph,
}

impl ScoreLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BonaFide => "bona_fide",
            Self::Morph => "morph",
        }
    }
}

impl FromStr for ScoreLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona_fide" => Ok(Self::BonaFide),
            "morph" => Ok(Self::Morph),
            other => Err(Error::Parse(format!("unknown label '{other}'"))),
        }
    }
}

/// One FRS comparison score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub label: ScoreLabel,
    pub scenario: RestorationScenario,
    pub score: f64,
    pub method: String,
    pub morph_method: Option<String>,
    /// Similarity between the output and the ground-truth target (morph pairs only).
    pub score_gt: Option<f64>,
}

impl ScoreRecord {
    pub fn new(
        pair_id: impl Into<String>,
        label: ScoreLabel,
        scenario: RestorationScenario,
        score: f64,
        method: impl Into<String>,
    ) -> Result<Self> {
        check_cosine(score)?;
        Ok(Self {
            pair_id: pair_id.into(),
            label,
            scenario,
            score,
            method: method.into(),
            morph_method: None,
            score_gt: None,
        })
    }
}

pub(crate) fn check_cosine(score: f64) -> Result<()> {
    if !score.is_finite() {
        return Err(Error::NonFinite("score"));
    }
    // Cosines of unit vectors can overshoot by rounding.
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&score) {
        return Err(Error::RangeError(format!("score {score} outside [-1, 1]")));
    }
    Ok(())
}

/// Which half of the alternating objective a training step optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PassType {
    BonaFidePass,
    MorphedPass,
}

impl PassType {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BonaFidePass => "bonafide",
            Self::MorphedPass => "morphed",
        }
    }
}

/// Loss coefficients for one pass, plus the hinge margin and R1 strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_ms_ssim: f64,
    pub lambda_feat: f64,
    pub lambda_inv_id: f64,
    pub lambda_adv: f64,
    pub margin_m: f64,
    pub gamma_r1: f64,
}

impl LossWeights {
    pub const DEFAULT_MARGIN: f64 = -0.5;
    pub const DEFAULT_GAMMA_R1: f64 = 10.0;

    pub fn bona_fide_pass() -> Self {
        Self {
            lambda_id: 0.1,
            lambda_l2: 0.1,
            lambda_lpips: 0.08,
            lambda_ms_ssim: 0.04,
            lambda_feat: 0.01,
            lambda_inv_id: 0.0,
            lambda_adv: 0.01,
            margin_m: Self::DEFAULT_MARGIN,
            gamma_r1: Self::DEFAULT_GAMMA_R1,
        }
    }

    pub fn morphed_pass() -> Self {
        Self {
            lambda_id: 1.0,
            lambda_l2: 1.0,
            lambda_lpips: 0.8,
            lambda_ms_ssim: 0.4,
            lambda_feat: 0.1,
            lambda_inv_id: 0.6,
            lambda_adv: 0.01,
            margin_m: Self::DEFAULT_MARGIN,
            gamma_r1: Self::DEFAULT_GAMMA_R1,
        }
    }

    pub fn for_pass(pass: PassType) -> Self {
        match pass {
            PassType::BonaFidePass => Self::bona_fide_pass(),
            PassType::MorphedPass => Self::morphed_pass(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_id,
            self.lambda_l2,
            self.lambda_lpips,
            self.lambda_ms_ssim,
            self.lambda_feat,
            self.lambda_inv_id,
            self.lambda_adv,
            self.gamma_r1,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss coefficients must be finite and nonnegative".into()));
        }
        if !(-1.0..=1.0).contains(&self.margin_m) {
            return Err(Error::Config(format!("margin {} outside [-1, 1]", self.margin_m)));
        }
        Ok(())
    }

    /// Enforces that the inverse-identity term is disabled on the bona fide pass.
    pub fn check_pass(&self, pass: PassType) -> Result<()> {
        self.validate()?;
        if pass == PassType::BonaFidePass && self.lambda_inv_id != 0.0 {
            return Err(Error::WeightsPassMismatch("bona fide"));
        }
        Ok(())
    }
}
