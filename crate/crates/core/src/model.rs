//! The full set of networks trained together.

use asymgan_autograd::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{
    build_code_discriminator, build_encoder, build_feature_extractor, build_generator_f,
    build_generator_g, build_patch_discriminator, NetConfig, NetHandle, ZForm, ZInjection,
};
use crate::rng::{stream_rng, Stream};

/// Training formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain cycle GAN: no encoder, `F` sees only `y`.
    BaselineCyclegan,
    AsymNoExt,
    AsymExt,
}

impl Mode {
    pub fn default_injection(self) -> ZInjection {
        match self {
            Mode::AsymExt => ZInjection::Cin,
            _ => ZInjection::ConcatMid,
        }
    }

    pub fn is_asym(self) -> bool {
        self != Mode::BaselineCyclegan
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub mode: Mode,
    pub net: NetConfig,
    pub z_injection: ZInjection,
}

impl Architecture {
    pub fn new(mode: Mode, net: NetConfig) -> Self {
        Self {
            mode,
            net,
            z_injection: mode.default_injection(),
        }
    }

    pub fn zform(&self) -> Option<ZForm> {
        self.mode.is_asym().then(|| self.z_injection.default_zform())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if let Some(z) = self.zform() {
            self.z_injection.check(z)?;
        }
        Ok(())
    }
}

/// `G`, `F`, `E`, `D_X`, `D_Y`, `D_Z` and the frozen feature stack.
#[derive(Clone, Debug)]
pub struct ModelBundle<S> {
    pub arch: Architecture,
    pub g: NetHandle<S>,
    pub f: NetHandle<S>,
    pub e: Option<NetHandle<S>>,
    pub d_x: NetHandle<S>,
    pub d_y: NetHandle<S>,
    pub d_z: Option<NetHandle<S>>,
    pub phi: NetHandle<S>,
}

impl<S: Scalar> ModelBundle<S> {
    /// Builds all networks from the `init` sub-stream of `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        Self::with_rng(arch, &mut stream_rng(seed, Stream::Init))
    }

    pub fn with_rng<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let cfg = &arch.net;
        let zform = arch.zform();
        let g = build_generator_g(cfg, rng)?;
        let f = build_generator_f(cfg, zform.map(|z| (z, arch.z_injection)), rng)?;
        let e = zform.map(|z| build_encoder(cfg, z, rng)).transpose()?;
        let d_x = build_patch_discriminator(cfg, rng)?;
        let d_y = build_patch_discriminator(cfg, rng)?;
        let d_z = zform.map(|z| build_code_discriminator(cfg, z, rng)).transpose()?;
        Ok(Self {
            arch,
            g,
            f,
            e,
            d_x,
            d_y,
            d_z,
            phi: build_feature_extractor(),
        })
    }

    /// Networks updated on the generator side, in a fixed order.
    pub fn generator_nets(&self) -> Vec<(&'static str, &NetHandle<S>)> {
        let mut v = vec![("G", &self.g), ("F", &self.f)];
        if let Some(e) = &self.e {
            v.push(("E", e));
        }
        v
    }

    pub fn discriminator_nets(&self) -> Vec<(&'static str, &NetHandle<S>)> {
        let mut v = vec![("D_X", &self.d_x), ("D_Y", &self.d_y)];
        if let Some(d) = &self.d_z {
            v.push(("D_Z", d));
        }
        v
    }

    pub fn generator_nets_mut(&mut self) -> Vec<&mut NetHandle<S>> {
        let mut v = vec![&mut self.g, &mut self.f];
        if let Some(e) = &mut self.e {
            v.push(e);
        }
        v
    }

    pub fn discriminator_nets_mut(&mut self) -> Vec<&mut NetHandle<S>> {
        let mut v = vec![&mut self.d_x, &mut self.d_y];
        if let Some(d) = &mut self.d_z {
            v.push(d);
        }
        v
    }

    /// Every network including the feature stack, with checkpoint prefixes.
    pub fn all_nets(&self) -> Vec<(&'static str, &NetHandle<S>)> {
        let mut v = self.generator_nets();
        v.extend(self.discriminator_nets());
        v.push(("phi", &self.phi));
        v
    }

    pub fn all_nets_mut(&mut self) -> Vec<(&'static str, &mut NetHandle<S>)> {
        let mut v: Vec<(&'static str, &mut NetHandle<S>)> =
            vec![("G", &mut self.g), ("F", &mut self.f)];
        if let Some(e) = &mut self.e {
            v.push(("E", e));
        }
        v.push(("D_X", &mut self.d_x));
        v.push(("D_Y", &mut self.d_y));
        if let Some(d) = &mut self.d_z {
            v.push(("D_Z", d));
        }
        v.push(("phi", &mut self.phi));
        v
    }

    pub fn encoder(&self) -> Result<&NetHandle<S>> {
        self.e
            .as_ref()
            .ok_or_else(|| Error::Argument("baseline bundle has no encoder".into()))
    }

    pub fn all_finite(&self) -> bool {
        self.all_nets().iter().all(|(_, n)| n.params().all_finite())
    }
}
