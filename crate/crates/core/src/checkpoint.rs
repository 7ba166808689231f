//! Saving and restoring a supernet between CLI invocations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hwmodel::PlatformProfile;
use crate::netspec::NetworkSpec;
use crate::quant::WeightQuantizer;
use crate::rng;
use crate::supernet::{Phase, Placement, Supernet, SupernetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network: NetworkSpec,
    pub platform: PlatformProfile,
    pub config: SupernetConfig,
    pub phase: Option<Phase>,
    pub quant_active: bool,
    /// Parameter values in store order, with their shapes.
    pub params: Vec<(Vec<usize>, Vec<f32>)>,
    pub taus: Vec<f32>,
    pub hard: Vec<Option<Vec<usize>>>,
    /// Per compute node, in node order.
    pub weight_quantizers: Vec<Vec<WeightQuantizer>>,
    pub act_ranges: Vec<Option<f32>>,
    /// Normalized and raw cost weight of the search that produced this state.
    #[serde(default)]
    pub lambda: Option<(f64, f64)>,
}

impl Checkpoint {
    pub fn of(net: &Supernet) -> Self {
        let computes = net.nodes.iter().filter_map(|n| n.compute.as_ref());
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network: net.spec.clone(),
            platform: net.platform.clone(),
            config: net.config,
            phase: net.phase,
            quant_active: net.quant_active,
            params: net
                .store
                .snapshot()
                .into_iter()
                .map(|t| (t.shape().to_vec(), t.into_data()))
                .collect(),
            taus: net.banks.iter().map(|b| b.tau).collect(),
            hard: net.banks.iter().map(|b| b.hard().map(|h| h.to_vec())).collect(),
            weight_quantizers: computes
                .clone()
                .map(|c| match &c.placement {
                    Placement::Fixed { quant, .. } => vec![quant.clone()],
                    Placement::Precision { quants, .. } => quants.clone(),
                    Placement::Operator { branches, .. } => branches.iter().map(|b| b.quant.clone()).collect(),
                })
                .collect(),
            act_ranges: computes.map(|c| c.act_quant.as_ref().and_then(|a| a.frozen_range)).collect(),
            lambda: None,
        }
    }

    /// Rebuilds the network and overwrites its state.
    pub fn restore(&self) -> Result<Supernet> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format_version {} (supported: {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let bad = |what: &str| Error::Config(format!("checkpoint does not match its network: {what}"));
        let mut net = Supernet::build(&self.network, &self.platform, self.config, &mut rng::seeded(0))?;
        let current = net.store.snapshot();
        if current.len() != self.params.len() {
            return Err(bad("parameter count"));
        }
        let mut values = Vec::with_capacity(current.len());
        for (cur, (shape, data)) in current.iter().zip(&self.params) {
            if cur.shape() != shape.as_slice() {
                return Err(bad("parameter shape"));
            }
            values.push(Tensor::new(shape.clone(), data.clone())?);
        }
        net.store.restore(&values);
        if self.taus.len() != net.banks.len() || self.hard.len() != net.banks.len() {
            return Err(bad("bank count"));
        }
        for (b, &tau) in net.banks.iter_mut().zip(&self.taus) {
            b.tau = tau;
        }
        if self.hard.iter().all(Option::is_some) && !self.hard.is_empty() {
            let a: Vec<Vec<usize>> = self.hard.iter().flatten().cloned().collect();
            net.set_hard_assignment(&a)?;
        }
        let mut computes: Vec<_> = net.nodes.iter_mut().filter_map(|n| n.compute.as_mut()).collect();
        if computes.len() != self.weight_quantizers.len() || computes.len() != self.act_ranges.len() {
            return Err(bad("layer count"));
        }
        for ((c, qs), range) in computes.iter_mut().zip(&self.weight_quantizers).zip(&self.act_ranges) {
            let slots: Vec<&mut WeightQuantizer> = match &mut c.placement {
                Placement::Fixed { quant, .. } => vec![quant],
                Placement::Precision { quants, .. } => quants.iter_mut().collect(),
                Placement::Operator { branches, .. } => branches.iter_mut().map(|b| &mut b.quant).collect(),
            };
            if slots.len() != qs.len() {
                return Err(bad("quantizer count"));
            }
            for (slot, q) in slots.into_iter().zip(qs) {
                *slot = q.clone();
            }
            if let Some(aq) = &mut c.act_quant {
                aq.frozen_range = *range;
            }
        }
        net.phase = self.phase;
        net.quant_active = self.quant_active;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))
    }
}
