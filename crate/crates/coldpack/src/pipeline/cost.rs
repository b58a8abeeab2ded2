//! Cost model: virtual-time durations per (operator kind, device).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Device, OpKind, SimError, DEFAULT_STEAL_THRESHOLD};

/// Duration `base + slope * (chunk + 1)`; attention costs grow with the
/// chunk index because each chunk attends over all earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "CostEntryJson", into = "CostEntryJson")]
pub struct CostEntry {
    pub base: f64,
    pub slope: f64,
}

impl CostEntry {
    pub fn constant(base: f64) -> Self {
        Self { base, slope: 0.0 }
    }

    pub fn affine(base: f64, slope: f64) -> Self {
        Self { base, slope }
    }

    pub fn at_chunk(&self, chunk: u32) -> f64 {
        self.base + self.slope * (chunk as f64 + 1.0)
    }
}

/// JSON form: a bare number for constant costs or `{base, slope}`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CostEntryJson {
    Constant(f64),
    Affine {
        base: f64,
        #[serde(default)]
        slope: f64,
    },
}

impl From<CostEntryJson> for CostEntry {
    fn from(j: CostEntryJson) -> Self {
        match j {
            CostEntryJson::Constant(base) => CostEntry::constant(base),
            CostEntryJson::Affine { base, slope } => CostEntry::affine(base, slope),
        }
    }
}

impl From<CostEntry> for CostEntryJson {
    fn from(e: CostEntry) -> Self {
        if e.slope == 0.0 {
            CostEntryJson::Constant(e.base)
        } else {
            CostEntryJson::Affine {
                base: e.base,
                slope: e.slope,
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceCosts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu: Option<CostEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npu: Option<CostEntry>,
}

/// Map from operator kind to per-device cost entries. Stolen tasks are
/// charged the CPU entry of their kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostModel {
    pub entries: BTreeMap<OpKind, DeviceCosts>,
}

impl CostModel {
    pub fn entry(&self, kind: OpKind, device: Device) -> Result<CostEntry, SimError> {
        let costs = self
            .entries
            .get(&kind)
            .ok_or(SimError::MissingCost { kind, device })?;
        let entry = match device {
            Device::Cpu => costs.cpu,
            Device::Npu => costs.npu,
        };
        entry.ok_or(SimError::MissingCost { kind, device })
    }

    pub fn cost(&self, kind: OpKind, device: Device, chunk: u32) -> Result<f64, SimError> {
        let c = self.entry(kind, device)?.at_chunk(chunk);
        if !(c > 0.0) {
            return Err(SimError::NonPositiveCost {
                kind,
                device,
                chunk,
            });
        }
        Ok(c)
    }

    pub fn set(&mut self, kind: OpKind, device: Device, entry: CostEntry) {
        let costs = self.entries.entry(kind).or_default();
        match device {
            Device::Cpu => costs.cpu = Some(entry),
            Device::Npu => costs.npu = Some(entry),
        }
    }

    /// Uniform cost for every kind on both devices; handy in tests.
    pub fn uniform(cost: f64) -> Self {
        let mut m = CostModel::default();
        for kind in super::OP_CHAIN {
            m.set(kind, Device::Cpu, CostEntry::constant(cost));
            m.set(kind, Device::Npu, CostEntry::constant(cost));
        }
        m
    }
}

/// A simulation scenario as shipped in JSON fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub n_layers: u32,
    pub n_chunks: u32,
    #[serde(default = "default_threshold")]
    pub steal_threshold: usize,
    pub cost_model: CostModel,
}

fn default_threshold() -> usize {
    DEFAULT_STEAL_THRESHOLD
}

/// The scenario shipped with the crate: one layer, sixteen chunks,
/// attention cost growing with the chunk index. The values are editable
/// placeholders for relative policy comparisons, not measurements.
pub fn bundled_scenario() -> Scenario {
    serde_json::from_str(include_str!("../../fixtures/prefill_16chunk.json"))
        .expect("bundled scenario parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_accepts_numbers_and_affine_objects() {
        let m: CostModel = serde_json::from_str(
            r#"{
                "RmsNormAttn": {"cpu": 1.0, "npu": 2.1},
                "Attention": {"cpu": {"base": 2.0, "slope": 1.5}}
            }"#,
        )
        .unwrap();
        assert_eq!(m.cost(OpKind::RmsNormAttn, Device::Npu, 0).unwrap(), 2.1);
        assert_eq!(m.cost(OpKind::Attention, Device::Cpu, 3).unwrap(), 8.0);
        assert!(matches!(
            m.cost(OpKind::Attention, Device::Npu, 0),
            Err(SimError::MissingCost { .. })
        ));
        assert!(matches!(
            m.cost(OpKind::QProj, Device::Npu, 0),
            Err(SimError::MissingCost { .. })
        ));
    }

    #[test]
    fn rejects_non_positive_costs() {
        let mut m = CostModel::default();
        m.set(OpKind::QProj, Device::Npu, CostEntry::constant(0.0));
        assert!(matches!(
            m.cost(OpKind::QProj, Device::Npu, 0),
            Err(SimError::NonPositiveCost { .. })
        ));
    }

    #[test]
    fn roundtrips_through_json() {
        let mut m = CostModel::uniform(1.0);
        m.set(OpKind::Attention, Device::Cpu, CostEntry::affine(2.0, 1.0));
        let text = serde_json::to_string(&m).unwrap();
        let back: CostModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
