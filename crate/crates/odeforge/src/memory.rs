//! On-chip memory planning: pack parameter and feature-map arrays into
//! BRAM/URAM instances of a device model.
//!
//! Arrays never span both memory kinds, and by default each array occupies
//! whole instances (no instance is shared by two arrays), a conservative
//! model of per-array partitioning. The reference placement policy pins the
//! standard convolutions of Downsampling1, the depthwise and pointwise
//! convolutions of Downsampling2, and the pointwise convolutions of ODEBlock3
//! to URAM; everything else, including the per-ODEBlock feature-map buffers,
//! goes to BRAM. A greedy alternative assigns each array (largest first) to
//! whichever memory kind currently wastes fewer bits, with ties broken
//! toward BRAM, and optionally packs arrays back to back within instances.

use crate::error::{Error, Result};
use crate::model::StageKind;
use crate::quant::QModel;

/// Device memory model. Defaults describe a part with 312 BRAM instances of
/// 36 kbit and 96 URAM instances of 288 kbit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSpec {
    pub bram_instance_bits: u64,
    pub uram_instance_bits: u64,
    pub bram_instances: u64,
    pub uram_instances: u64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec {
            bram_instance_bits: 36_864,
            uram_instance_bits: 294_912,
            bram_instances: 312,
            uram_instances: 96,
        }
    }
}

impl DeviceSpec {
    pub fn instance_bits(&self, kind: MemKind) -> u64 {
        match kind {
            MemKind::Bram => self.bram_instance_bits,
            MemKind::Uram => self.uram_instance_bits,
        }
    }

    pub fn instances(&self, kind: MemKind) -> u64 {
        match kind {
            MemKind::Bram => self.bram_instances,
            MemKind::Uram => self.uram_instances,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemKind {
    Bram,
    Uram,
}

impl std::fmt::Display for MemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MemKind::Bram => write!(f, "BRAM"),
            MemKind::Uram => write!(f, "URAM"),
        }
    }
}

/// One array to place: a parameter array or a feature-map buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanArray {
    pub name: String,
    pub bits: u64,
    pub is_buffer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackPolicy {
    /// The reference placement described in the module docs.
    Paper,
    /// Waste-minimizing assignment, largest arrays first.
    Greedy { shared: bool },
}

impl PackPolicy {
    pub fn parse(s: &str) -> Result<PackPolicy> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(PackPolicy::Paper),
            "greedy" => Ok(PackPolicy::Greedy { shared: false }),
            "greedy-shared" | "greedy_shared" => Ok(PackPolicy::Greedy { shared: true }),
            other => Err(Error::config("policy", format!("unknown policy `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub name: String,
    pub kind: MemKind,
    pub bits: u64,
    /// Instances newly occupied by this array (whole-instance packing) or
    /// newly opened (shared packing).
    pub instances: u64,
    /// Unused bits inside this array's instances (always zero under shared
    /// packing, where waste accrues per memory kind instead).
    pub waste_bits: u64,
}

/// Result of planning: per-array assignments plus per-kind totals satisfying
/// `packed bits + waste bits = instances used * instance bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    pub assignments: Vec<Assignment>,
    pub bram_instances_used: u64,
    pub uram_instances_used: u64,
    pub bram_packed_bits: u64,
    pub uram_packed_bits: u64,
    pub bram_waste_bits: u64,
    pub uram_waste_bits: u64,
    pub fits: bool,
    /// Instances over device capacity when `fits` is false.
    pub bram_overflow_instances: u64,
    pub uram_overflow_instances: u64,
    pub shared_packing: bool,
}

/// Extract the plannable arrays of a quantized model: every block parameter
/// array at its storage word width, plus three feature-map buffers per
/// ODEBlock (each extended by the AddTime channel, at the activation width).
pub fn model_arrays(qmodel: &QModel) -> Vec<PlanArray> {
    let mut arrays: Vec<PlanArray> = qmodel
        .named_arrays()
        .into_iter()
        .map(|(name, t)| PlanArray {
            name,
            bits: t.len() as u64 * t.fmt().total_bits() as u64,
            is_buffer: false,
        })
        .collect();
    let act_bits = qmodel.blocks.act_fmt.total_bits() as u64;
    let plans = qmodel.spec.stage_plan();
    let shapes = qmodel.spec.stage_output_shapes();
    for (plan, shape) in plans.iter().zip(&shapes) {
        if let StageKind::Block { channels } = plan.kind {
            if plan.key.starts_with("odeblock") {
                let bits = (channels as u64 + 1) * shape[1] as u64 * shape[2] as u64 * act_bits;
                for i in 0..3 {
                    arrays.push(PlanArray {
                        name: format!("{}.buffer{}", plan.key, i),
                        bits,
                        is_buffer: true,
                    });
                }
            }
        }
    }
    arrays
}

fn paper_kind(array: &PlanArray) -> MemKind {
    let n = array.name.as_str();
    let uram = !array.is_buffer
        && (n.starts_with("downsampling1.")
            || (n.starts_with("downsampling2.") && (n.contains(".dw.") || n.contains(".pw.")))
            || (n.starts_with("odeblock3.") && n.contains(".pw.")));
    if uram {
        MemKind::Uram
    } else {
        MemKind::Bram
    }
}

fn whole_instances(bits: u64, instance_bits: u64) -> u64 {
    bits.div_ceil(instance_bits)
}

struct KindState {
    used: u64,
    packed: u64,
    /// Bits left in the currently open instance (shared packing only).
    open_remainder: u64,
}

impl KindState {
    fn new() -> Self {
        KindState {
            used: 0,
            packed: 0,
            open_remainder: 0,
        }
    }

    /// Instances newly required to place `bits` under a packing mode.
    fn marginal_instances(&self, bits: u64, instance_bits: u64, shared: bool) -> u64 {
        if shared {
            let remaining = bits.saturating_sub(self.open_remainder);
            whole_instances(remaining, instance_bits)
        } else {
            whole_instances(bits, instance_bits)
        }
    }

    fn place(&mut self, bits: u64, instance_bits: u64, shared: bool) -> u64 {
        let new = self.marginal_instances(bits, instance_bits, shared);
        self.used += new;
        self.packed += bits;
        if shared {
            let capacity = self.open_remainder + new * instance_bits;
            self.open_remainder = capacity - bits;
        }
        new
    }

    fn waste(&self, instance_bits: u64) -> u64 {
        self.used * instance_bits - self.packed
    }
}

/// Plan the placement of a quantized model's arrays on a device.
pub fn plan(qmodel: &QModel, device: &DeviceSpec, policy: PackPolicy) -> Result<MemoryPlan> {
    Ok(plan_arrays(&model_arrays(qmodel), device, policy))
}

/// Plan an explicit array list. Capacity overruns never fail: the plan comes
/// back with `fits = false` and the overflow amounts.
pub fn plan_arrays(arrays: &[PlanArray], device: &DeviceSpec, policy: PackPolicy) -> MemoryPlan {
    let shared = matches!(policy, PackPolicy::Greedy { shared: true });
    let mut bram = KindState::new();
    let mut uram = KindState::new();
    let mut assignments = Vec::with_capacity(arrays.len());

    let order: Vec<&PlanArray> = match policy {
        PackPolicy::Paper => arrays.iter().collect(),
        PackPolicy::Greedy { .. } => {
            let mut v: Vec<&PlanArray> = arrays.iter().collect();
            // largest first; name as the deterministic tie-breaker
            v.sort_by(|a, b| b.bits.cmp(&a.bits).then_with(|| a.name.cmp(&b.name)));
            v
        }
    };

    for array in order {
        let kind = match policy {
            PackPolicy::Paper => paper_kind(array),
            PackPolicy::Greedy { .. } => {
                let b_new = bram.marginal_instances(array.bits, device.bram_instance_bits, shared);
                let u_new = uram.marginal_instances(array.bits, device.uram_instance_bits, shared);
                // change in (used * instance_bits - packed) for each kind;
                // negative under shared packing when an open instance absorbs
                // the array
                let b_waste = (b_new * device.bram_instance_bits) as i64 - array.bits as i64;
                let u_waste = (u_new * device.uram_instance_bits) as i64 - array.bits as i64;
                let b_fits = bram.used + b_new <= device.bram_instances;
                let u_fits = uram.used + u_new <= device.uram_instances;
                match (b_fits, u_fits) {
                    (true, false) => MemKind::Bram,
                    (false, true) => MemKind::Uram,
                    // both fit (or neither): minimize waste bits, then
                    // instance count (keeps exact-fit giants from starving
                    // the finer-grained memory), then BRAM
                    _ => {
                        if (u_waste, u_new) < (b_waste, b_new) {
                            MemKind::Uram
                        } else {
                            MemKind::Bram
                        }
                    }
                }
            }
        };
        let state = match kind {
            MemKind::Bram => &mut bram,
            MemKind::Uram => &mut uram,
        };
        let instance_bits = device.instance_bits(kind);
        let new = state.place(array.bits, instance_bits, shared);
        let waste_bits = if shared { 0 } else { new * instance_bits - array.bits };
        assignments.push(Assignment {
            name: array.name.clone(),
            kind,
            bits: array.bits,
            instances: new,
            waste_bits,
        });
    }

    let bram_overflow = bram.used.saturating_sub(device.bram_instances);
    let uram_overflow = uram.used.saturating_sub(device.uram_instances);
    MemoryPlan {
        assignments,
        bram_instances_used: bram.used,
        uram_instances_used: uram.used,
        bram_packed_bits: bram.packed,
        uram_packed_bits: uram.packed,
        bram_waste_bits: bram.waste(device.bram_instance_bits),
        uram_waste_bits: uram.waste(device.uram_instance_bits),
        fits: bram_overflow == 0 && uram_overflow == 0,
        bram_overflow_instances: bram_overflow,
        uram_overflow_instances: uram_overflow,
        shared_packing: shared,
    }
}

/// Fit verification with totals recomputed from the per-array assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub fits: bool,
    pub bram_used: u64,
    pub uram_used: u64,
    pub bram_utilization_percent: f64,
    pub uram_utilization_percent: f64,
}

pub fn verify_fit(plan: &MemoryPlan, device: &DeviceSpec) -> FitReport {
    let mut bram_used = 0u64;
    let mut uram_used = 0u64;
    for a in &plan.assignments {
        match a.kind {
            MemKind::Bram => bram_used += a.instances,
            MemKind::Uram => uram_used += a.instances,
        }
    }
    FitReport {
        fits: bram_used <= device.bram_instances && uram_used <= device.uram_instances,
        bram_used,
        uram_used,
        bram_utilization_percent: 100.0 * bram_used as f64 / device.bram_instances as f64,
        uram_utilization_percent: 100.0 * uram_used as f64 / device.uram_instances as f64,
    }
}

/// Text rendering: one line per array then the per-kind summary.
pub fn render_plan(plan: &MemoryPlan, device: &DeviceSpec) -> String {
    let mut out = String::new();
    let width = plan
        .assignments
        .iter()
        .map(|a| a.name.len())
        .max()
        .unwrap_or(8);
    for a in &plan.assignments {
        out.push_str(&format!(
            "{:width$}  {}  {:>12} bits  {:>4} inst  {:>10} waste\n",
            a.name,
            a.kind,
            a.bits,
            a.instances,
            a.waste_bits,
            width = width
        ));
    }
    let fit = verify_fit(plan, device);
    out.push_str(&format!(
        "BRAM {:>4}/{} ({:.1}%)   URAM {:>3}/{} ({:.1}%)   fits: {}\n",
        fit.bram_used,
        device.bram_instances,
        fit.bram_utilization_percent,
        fit.uram_used,
        device.uram_instances,
        fit.uram_utilization_percent,
        fit.fits
    ));
    out
}

/// CSV rendering with columns `array,kind,bits,instances,waste_bits`.
pub fn plan_to_csv(plan: &MemoryPlan) -> String {
    let mut out = String::from("array,kind,bits,instances,waste_bits\n");
    for a in &plan.assignments {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.name, a.kind, a.bits, a.instances, a.waste_bits
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec, Variant};
    use crate::quant::{quantize_model, QuantScheme};

    fn one(name: &str, bits: u64) -> PlanArray {
        PlanArray {
            name: name.to_string(),
            bits,
            is_buffer: false,
        }
    }

    #[test]
    fn uram_array_exact_fit() {
        // 73,728 words of 20 bits fill exactly five URAM instances
        let arrays = vec![one("downsampling1.conv1.weight", 73_728 * 20)];
        let plan = plan_arrays(&arrays, &DeviceSpec::default(), PackPolicy::Paper);
        assert_eq!(plan.assignments[0].kind, MemKind::Uram);
        assert_eq!(plan.assignments[0].instances, 5);
        assert_eq!(plan.assignments[0].waste_bits, 0);
    }

    #[test]
    fn bram_array_with_waste() {
        let arrays = vec![one("odeblock1.conv1.pw.weight", 4_672 * 20)];
        let plan = plan_arrays(&arrays, &DeviceSpec::default(), PackPolicy::Paper);
        assert_eq!(plan.assignments[0].kind, MemKind::Bram);
        assert_eq!(plan.assignments[0].instances, 3);
        assert_eq!(plan.assignments[0].waste_bits, 17_152);
    }

    #[test]
    fn empty_model_plan_fits() {
        let plan = plan_arrays(&[], &DeviceSpec::default(), PackPolicy::Paper);
        assert!(plan.fits);
        assert!(plan.assignments.is_empty());
        assert_eq!(plan.bram_instances_used, 0);
    }

    #[test]
    fn utilization_percentages() {
        let device = DeviceSpec::default();
        let arrays: Vec<PlanArray> = (0..92)
            .map(|i| one(&format!("downsampling1.chunk{i}"), device.uram_instance_bits))
            .collect();
        let plan = plan_arrays(&arrays, &device, PackPolicy::Paper);
        let fit = verify_fit(&plan, &device);
        assert_eq!(fit.uram_used, 92);
        assert_eq!(format!("{:.1}", fit.uram_utilization_percent), "95.8");
        assert_eq!(fit.bram_used, 0);
    }

    #[test]
    fn conservation_per_kind() {
        let spec = ModelSpec::new(Variant::DsOdeNet, 3);
        let model = Model::zeros(&spec).unwrap();
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let device = DeviceSpec::default();
        for policy in [PackPolicy::Paper, PackPolicy::Greedy { shared: false }] {
            let plan = super::plan(&qm, &device, policy).unwrap();
            let mut packed = (0u64, 0u64);
            let mut waste = (0u64, 0u64);
            let mut used = (0u64, 0u64);
            for a in &plan.assignments {
                match a.kind {
                    MemKind::Bram => {
                        packed.0 += a.bits;
                        waste.0 += a.waste_bits;
                        used.0 += a.instances;
                    }
                    MemKind::Uram => {
                        packed.1 += a.bits;
                        waste.1 += a.waste_bits;
                        used.1 += a.instances;
                    }
                }
            }
            assert_eq!(packed.0 + waste.0, used.0 * device.bram_instance_bits);
            assert_eq!(packed.1 + waste.1, used.1 * device.uram_instance_bits);
            assert_eq!(plan.bram_waste_bits, waste.0);
            assert_eq!(plan.uram_waste_bits, waste.1);
        }
    }

    #[test]
    fn shared_conservation_at_kind_level() {
        let spec = ModelSpec::new(Variant::DsOdeNet, 3);
        let model = Model::zeros(&spec).unwrap();
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let device = DeviceSpec::default();
        let plan = super::plan(&qm, &device, PackPolicy::Greedy { shared: true }).unwrap();
        assert_eq!(
            plan.bram_packed_bits + plan.bram_waste_bits,
            plan.bram_instances_used * device.bram_instance_bits
        );
        assert_eq!(
            plan.uram_packed_bits + plan.uram_waste_bits,
            plan.uram_instances_used * device.uram_instance_bits
        );
    }

    #[test]
    fn digit_model_fits_under_paper_policy() {
        let spec = ModelSpec::new(Variant::DsOdeNet, 3);
        let model = Model::zeros(&spec).unwrap();
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let device = DeviceSpec::default();
        let plan = super::plan(&qm, &device, PackPolicy::Paper).unwrap();
        assert!(plan.fits);
        // cross-check with a one-pass bit-sum oracle: total packed bits must
        // fit in the used instances under both kinds
        let fit = verify_fit(&plan, &device);
        assert!(fit.fits);
        assert!(fit.uram_used > 0 && fit.bram_used > 0);
    }

    #[test]
    fn paper_policy_pins_documented_arrays_to_uram() {
        let spec = ModelSpec::new(Variant::DsOdeNet, 3);
        let model = Model::zeros(&spec).unwrap();
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let plan = super::plan(&qm, &DeviceSpec::default(), PackPolicy::Paper).unwrap();
        for a in &plan.assignments {
            let expect_uram = a.name.starts_with("downsampling1.")
                || (a.name.starts_with("downsampling2.")
                    && (a.name.contains(".dw.") || a.name.contains(".pw.")))
                || (a.name.starts_with("odeblock3.") && a.name.contains(".pw."));
            assert_eq!(a.kind == MemKind::Uram, expect_uram, "{}", a.name);
        }
        // feature-map buffers exist, three per ODEBlock, on BRAM
        let buffers: Vec<_> = plan
            .assignments
            .iter()
            .filter(|a| a.name.contains(".buffer"))
            .collect();
        assert_eq!(buffers.len(), 9);
        assert!(buffers.iter().all(|a| a.kind == MemKind::Bram));
    }

    #[test]
    fn greedy_never_wastes_more_than_paper() {
        let device = DeviceSpec::default();
        for (variant, blocks) in [
            (Variant::DsOdeNet, 3),
            (Variant::DsOdeNet, 2),
            (Variant::OdeNet, 3),
            (Variant::OdeNet, 2),
            (Variant::ResNet, 3),
            (Variant::ResNet, 2),
        ] {
            let spec = ModelSpec::new(variant, blocks);
            let model = Model::zeros(&spec).unwrap();
            let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
            let paper = super::plan(&qm, &device, PackPolicy::Paper).unwrap();
            let greedy = super::plan(&qm, &device, PackPolicy::Greedy { shared: false }).unwrap();
            let paper_waste = paper.bram_waste_bits + paper.uram_waste_bits;
            let greedy_waste = greedy.bram_waste_bits + greedy.uram_waste_bits;
            assert!(
                greedy_waste <= paper_waste,
                "{variant:?}/{blocks}: greedy {greedy_waste} > paper {paper_waste}"
            );
        }
    }

    #[test]
    fn adding_an_array_never_decreases_instances() {
        let device = DeviceSpec::default();
        let mut arrays = vec![one("a.weight", 10_000), one("b.weight", 500_000)];
        let before = plan_arrays(&arrays, &device, PackPolicy::Greedy { shared: false });
        arrays.push(one("c.weight", 123));
        let after = plan_arrays(&arrays, &device, PackPolicy::Greedy { shared: false });
        assert!(
            after.bram_instances_used + after.uram_instances_used
                >= before.bram_instances_used + before.uram_instances_used
        );
    }

    #[test]
    fn overflow_reports_instead_of_failing() {
        let device = DeviceSpec {
            bram_instances: 1,
            uram_instances: 1,
            ..DeviceSpec::default()
        };
        let arrays = vec![
            one("big1", 40 * device.uram_instance_bits),
            one("big2", 40 * device.uram_instance_bits),
        ];
        let plan = plan_arrays(&arrays, &device, PackPolicy::Greedy { shared: false });
        assert!(!plan.fits);
        assert!(plan.bram_overflow_instances > 0 || plan.uram_overflow_instances > 0);
    }
}
