use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{export_parameters, import_parameters, join_prefix, Parameters, Scalar, Var};
use crate::encoders::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::ray_marcher::{MarchConfig, MarchSchedule, MarcherConfig, MarcherWeights};
use crate::renderer::BlendWeights;
use crate::view_select::ViewSelection;

/// Everything that determines the network shape and the rendering procedure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub marcher: MarcherConfig,
    pub march: MarchConfig,
    pub schedule: MarchSchedule,
    pub selection: ViewSelection,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.marcher.conv_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("conv kernel must be odd".into()));
        }
        if !(self.march.t_init_fraction >= 0.0 && self.march.t_max_fraction > self.march.t_init_fraction) {
            return Err(Error::InvalidConfig("need 0 <= t_init_fraction < t_max_fraction".into()));
        }
        Ok(())
    }
}

/// Feature U-Net, marcher and blending network.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub unet: UNet<T>,
    pub marcher: MarcherWeights<T>,
    pub blend: BlendWeights<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            unet: UNet::new(&mut rng, config.unet),
            marcher: MarcherWeights::new(&mut rng, config.marcher)?,
            blend: BlendWeights::new(&mut rng),
            config,
        })
    }

    /// Same parameters in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone(), 0).expect("config already validated");
        import_parameters(&mut out, &export_parameters(self)).expect("identical layout");
        out
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.unet.visit(&join_prefix(prefix, "unet"), f);
        self.marcher.visit(&join_prefix(prefix, "marcher"), f);
        self.blend.visit(&join_prefix(prefix, "blend"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.unet.visit_mut(&join_prefix(prefix, "unet"), f);
        self.marcher.visit_mut(&join_prefix(prefix, "marcher"), f);
        self.blend.visit_mut(&join_prefix(prefix, "blend"), f);
    }
}
