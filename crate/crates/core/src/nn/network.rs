use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::arch::{build_from, ArchSpec, ClassifierHead, Group};
use super::layers::BatchNorm2d;
use super::param::{BnUpdate, Init, Model, Module, Param, ParamKind, Pass, Region};
use crate::error::{arg_err, Error, Result};
use crate::merge::MergeCnn;
use crate::tensor::{Tensor, Var};

/// Index of the residual group whose end is the shared stem boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttachPoint(pub usize);

impl Default for AttachPoint {
    fn default() -> Self {
        AttachPoint(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Main,
    Second,
    Merged,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(HeadMode::Main),
            "second" => Ok(HeadMode::Second),
            "merged" => Ok(HeadMode::Merged),
            other => Err(arg_err!("unknown head mode {other:?} (expected main, second or merged)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    Copy,
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Main,
    Second,
}

#[derive(Clone, Debug)]
pub struct SecondHead {
    pub spec: ArchSpec,
    groups: Vec<Group>,
    head: ClassifierHead,
}

/// Parameter counts per region (trainable weights only).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub stem: usize,
    pub head_main: usize,
    pub head_second: usize,
    pub merge: usize,
    pub total: usize,
    /// `head_second / (stem + head_main)`.
    pub second_to_base: f64,
    /// `head_second / head_main`.
    pub second_to_main: f64,
}

/// Shared stem, main head, optional second head and optional merge CNN.
///
/// A freshly built network has only the main head; `groups[..=attach]`
/// form the stem and the remaining groups plus the classifier the main head.
#[derive(Clone, Debug)]
pub struct DualHeadNetwork {
    spec: ArchSpec,
    attach: usize,
    groups: Vec<Group>,
    head: ClassifierHead,
    second: Option<SecondHead>,
    merge: Option<MergeCnn>,
    main_enabled: bool,
    second_enabled: bool,
}

/// Builds a single-head classifier with the default attach point.
pub fn build_network(spec: &ArchSpec, init: &mut Init) -> Result<DualHeadNetwork> {
    let (groups, head) = build_from(spec, 0, "", init)?;
    Ok(DualHeadNetwork {
        spec: spec.clone(),
        attach: AttachPoint::default().0.min(groups.len() - 1),
        groups,
        head,
        second: None,
        merge: None,
        main_enabled: true,
        second_enabled: true,
    })
}

/// Branches a second head off `base` after group `attach`.
pub fn attach_second_head(
    mut base: DualHeadNetwork,
    attach: AttachPoint,
    second_spec: &ArchSpec,
    init_mode: HeadInit,
    init: &mut Init,
) -> Result<DualHeadNetwork> {
    if base.second.is_some() {
        return Err(Error::State("network already has a second head".into()));
    }
    let g = attach.0;
    let main_layout = base.spec.layout()?;
    let second_layout = second_spec.layout()?;
    let last = main_layout.groups.len() - 1;
    if g == 0 || g > last {
        return Err(Error::Architecture(format!(
            "attach point {g} must lie between group 1 and group {last}"
        )));
    }
    if g >= second_layout.groups.len() {
        return Err(Error::Architecture(format!(
            "second head has only {} groups, cannot branch after group {g}",
            second_layout.groups.len() - 1
        )));
    }
    if second_spec.num_classes != base.spec.num_classes {
        return Err(Error::Architecture(format!(
            "heads disagree on class count: {} vs {}",
            base.spec.num_classes, second_spec.num_classes
        )));
    }
    let (mb, sb) = (&main_layout.groups[g], &second_layout.groups[g]);
    if second_spec.input_channels != base.spec.input_channels
        || second_spec.input_size != base.spec.input_size
        || mb.out_ch != sb.out_ch
        || mb.out_spatial != sb.out_spatial
    {
        return Err(Error::Architecture(format!(
            "stem output {}x{}x{} does not match second head input {}x{}x{}",
            mb.out_ch, mb.out_spatial, mb.out_spatial, sb.out_ch, sb.out_spatial, sb.out_spatial
        )));
    }
    let (groups, head) = build_from(second_spec, g + 1, "second.", init)?;
    let mut second = SecondHead {
        spec: second_spec.clone(),
        groups,
        head,
    };
    base.attach = g;
    if init_mode == HeadInit::Copy {
        let mut source: HashMap<&str, &Param> = HashMap::new();
        base.visit_regions(&mut |r, p| {
            if r == Region::HeadMain {
                source.insert(p.name.as_str(), p);
            }
        });
        let mut failure = None;
        let mut visit = |p: &mut Param| {
            if failure.is_some() {
                return;
            }
            let key = p.name.strip_prefix("second.").unwrap_or(&p.name);
            match source.get(key) {
                Some(src) if src.value.shape() == p.value.shape() => p.value = src.value.clone(),
                Some(src) => {
                    failure = Some(arg_err!(
                        "cannot copy {key}: shapes {:?} and {:?} differ",
                        src.value.shape(),
                        p.value.shape()
                    ))
                }
                None => failure = Some(arg_err!("cannot copy {key}: no such tensor in the main head")),
            }
        };
        for grp in &mut second.groups {
            grp.visit_mut(&mut visit);
        }
        second.head.visit_mut(&mut visit);
        if let Some(e) = failure {
            return Err(e);
        }
    }
    base.second = Some(second);
    Ok(base)
}

/// Adds the merge CNN to a dual-head network.
pub fn attach_merge(mut net: DualHeadNetwork, init: &mut Init) -> Result<DualHeadNetwork> {
    if net.second.is_none() {
        return Err(Error::State("merge CNN needs both heads".into()));
    }
    if net.merge.is_some() {
        return Err(Error::State("network already has a merge CNN".into()));
    }
    net.merge = Some(MergeCnn::new(net.spec.num_classes, init)?);
    Ok(net)
}

impl DualHeadNetwork {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn second_spec(&self) -> Option<&ArchSpec> {
        self.second.as_ref().map(|s| &s.spec)
    }

    pub fn attach_point(&self) -> AttachPoint {
        AttachPoint(self.attach)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn has_second(&self) -> bool {
        self.second.is_some()
    }

    pub fn has_merge(&self) -> bool {
        self.merge.is_some()
    }

    pub fn merge(&self) -> Option<&MergeCnn> {
        self.merge.as_ref()
    }

    pub fn is_enabled(&self, head: Head) -> bool {
        match head {
            Head::Main => self.main_enabled,
            Head::Second => self.second_enabled,
        }
    }

    pub fn set_enabled(&mut self, head: Head, on: bool) {
        match head {
            Head::Main => self.main_enabled = on,
            Head::Second => self.second_enabled = on,
        }
    }

    /// The mode used when the network is evaluated as a plain [`Model`]:
    /// merged when available, otherwise whichever head is enabled.
    pub fn default_mode(&self) -> HeadMode {
        if self.merge.is_some() && self.main_enabled && self.second_enabled {
            HeadMode::Merged
        } else if self.second.is_some() && self.second_enabled && !self.main_enabled {
            HeadMode::Second
        } else {
            HeadMode::Main
        }
    }

    fn check_mode(&self, mode: HeadMode) -> Result<()> {
        match mode {
            HeadMode::Main if !self.main_enabled => Err(Error::State("main head is disabled".into())),
            HeadMode::Second if self.second.is_none() => Err(Error::State("no second head attached".into())),
            HeadMode::Second if !self.second_enabled => {
                Err(Error::State("second head is disabled".into()))
            }
            HeadMode::Merged if self.merge.is_none() => Err(Error::State("no merge CNN attached".into())),
            HeadMode::Merged if !(self.main_enabled && self.second_enabled) => Err(Error::State(
                "merged mode needs both heads enabled".into(),
            )),
            _ => Ok(()),
        }
    }

    fn stem<'a>(&'a self, pass: &mut Pass<'a>, mut x: Var) -> Result<Var> {
        pass.count_stem_call();
        for g in &self.groups[..=self.attach] {
            x = g.forward(pass, x)?;
        }
        Ok(x)
    }

    fn main_tail<'a>(&'a self, pass: &mut Pass<'a>, mut h: Var) -> Result<Var> {
        for g in &self.groups[self.attach + 1..] {
            h = g.forward(pass, h)?;
        }
        self.head.forward(pass, h)
    }

    fn second_tail<'a>(&'a self, pass: &mut Pass<'a>, mut h: Var) -> Result<Var> {
        let second = self.second.as_ref().ok_or_else(|| Error::State("no second head attached".into()))?;
        for g in &second.groups {
            h = g.forward(pass, h)?;
        }
        second.head.forward(pass, h)
    }

    /// Both heads' logits from a single stem evaluation.
    pub fn head_logits<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<(Var, Var)> {
        if self.second.is_none() {
            return Err(Error::State("no second head attached".into()));
        }
        let h = self.stem(pass, x)?;
        let main = self.main_tail(pass, h)?;
        let second = self.second_tail(pass, h)?;
        Ok((main, second))
    }

    /// Pre-softmax scores of the requested output.
    pub fn scores<'a>(&'a self, pass: &mut Pass<'a>, x: Var, mode: HeadMode) -> Result<Var> {
        self.check_mode(mode)?;
        match mode {
            HeadMode::Main => {
                let h = self.stem(pass, x)?;
                self.main_tail(pass, h)
            }
            HeadMode::Second => {
                let h = self.stem(pass, x)?;
                self.second_tail(pass, h)
            }
            HeadMode::Merged => {
                let (a, b) = self.head_logits(pass, x)?;
                let merge = self.merge.as_ref().expect("checked");
                merge.scores(pass, a, b)
            }
        }
    }

    /// Raw logits for `main`/`second`, class probabilities for `merged`.
    pub fn forward<'a>(&'a self, pass: &mut Pass<'a>, x: Var, mode: HeadMode) -> Result<Var> {
        let z = self.scores(pass, x, mode)?;
        if mode == HeadMode::Merged {
            pass.graph.softmax(z)
        } else {
            Ok(z)
        }
    }

    /// Inference-mode forward on a tensor batch.
    pub fn predict(&self, x: &Tensor, mode: HeadMode) -> Result<Tensor> {
        let mut pass = Pass::inference();
        let xv = pass.input(x);
        let y = self.forward(&mut pass, xv, mode)?;
        Ok(pass.graph.value(y).clone())
    }

    pub fn view(&self, mode: HeadMode) -> Result<HeadView<'_>> {
        self.check_mode(mode)?;
        Ok(HeadView { net: self, mode })
    }

    fn region_of_group(&self, gi: usize) -> Region {
        if gi <= self.attach {
            Region::Stem
        } else {
            Region::HeadMain
        }
    }

    pub fn visit_regions<'s>(&'s self, f: &mut dyn FnMut(Region, &'s Param)) {
        for (gi, g) in self.groups.iter().enumerate() {
            let r = self.region_of_group(gi);
            g.visit(&mut |p| f(r, p));
        }
        self.head.visit(&mut |p| f(Region::HeadMain, p));
        if let Some(s) = &self.second {
            for g in &s.groups {
                g.visit(&mut |p| f(Region::HeadSecond, p));
            }
            s.head.visit(&mut |p| f(Region::HeadSecond, p));
        }
        if let Some(m) = &self.merge {
            m.visit(&mut |p| f(Region::Merge, p));
        }
    }

    pub fn visit_regions_mut(&mut self, f: &mut dyn FnMut(Region, &mut Param)) {
        let attach = self.attach;
        for (gi, g) in self.groups.iter_mut().enumerate() {
            let r = if gi <= attach { Region::Stem } else { Region::HeadMain };
            g.visit_mut(&mut |p| f(r, p));
        }
        self.head.visit_mut(&mut |p| f(Region::HeadMain, p));
        if let Some(s) = &mut self.second {
            for g in &mut s.groups {
                g.visit_mut(&mut |p| f(Region::HeadSecond, p));
            }
            s.head.visit_mut(&mut |p| f(Region::HeadSecond, p));
        }
        if let Some(m) = &mut self.merge {
            m.visit_mut(&mut |p| f(Region::Merge, p));
        }
    }

    /// All parameters and buffers in a stable order.
    pub fn params(&self) -> Vec<(Region, &Param)> {
        let mut out = Vec::new();
        self.visit_regions(&mut |r, p| out.push((r, p)));
        out
    }

    pub fn set_freeze(&mut self, region: Region, frozen: bool) {
        self.visit_regions_mut(&mut |r, p| {
            if r == region {
                p.frozen = frozen;
            }
        });
    }

    /// True when every parameter in `region` is frozen (vacuously true for an
    /// absent region).
    pub fn is_frozen(&self, region: Region) -> bool {
        let mut all = true;
        self.visit_regions(&mut |r, p| {
            if r == region && !p.frozen {
                all = false;
            }
        });
        all
    }

    pub fn region_exists(&self, region: Region) -> bool {
        match region {
            Region::Stem | Region::HeadMain => true,
            Region::HeadSecond => self.second.is_some(),
            Region::Merge => self.merge.is_some(),
        }
    }

    pub fn parameter_census(&self) -> Census {
        let mut c = Census::default();
        self.visit_regions(&mut |r, p| {
            if p.kind != ParamKind::Weight {
                return;
            }
            let n = p.value.len();
            match r {
                Region::Stem => c.stem += n,
                Region::HeadMain => c.head_main += n,
                Region::HeadSecond => c.head_second += n,
                Region::Merge => c.merge += n,
            }
        });
        c.total = c.stem + c.head_main + c.head_second + c.merge;
        c.second_to_base = c.head_second as f64 / (c.stem + c.head_main) as f64;
        c.second_to_main = c.head_second as f64 / c.head_main as f64;
        c
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            for b in &mut g.blocks {
                out.extend(b.batch_norms_mut());
            }
        }
        out.extend(self.head.bn.as_mut());
        if let Some(s) = &mut self.second {
            for g in &mut s.groups {
                for b in &mut g.blocks {
                    out.extend(b.batch_norms_mut());
                }
            }
            out.extend(s.head.bn.as_mut());
        }
        if let Some(m) = &mut self.merge {
            out.push(m.batch_norm_mut());
        }
        out
    }

    /// Folds running-statistic updates recorded during a training pass.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        if updates.is_empty() {
            return;
        }
        let mut layers: HashMap<String, &mut BatchNorm2d> =
            self.batch_norms_mut().into_iter().map(|bn| (bn.name.clone(), bn)).collect();
        for u in updates {
            if let Some(bn) = layers.get_mut(&u.layer) {
                bn.apply_update(u);
            }
        }
    }

    /// Name-keyed copies of every tensor, for snapshots and diffs.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_regions(&mut |_, p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }

    /// Overwrites every tensor from `state`; all names must be present with
    /// matching shapes.
    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut failure = None;
        self.visit_regions_mut(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            match state.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => failure = Some(Error::Checkpoint(format!("missing tensor {}", p.name))),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

impl Model for DualHeadNetwork {
    fn logits<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        self.scores(pass, x, self.default_mode())
    }
}

/// A network evaluated through one fixed output. For the merged output
/// `logits` are the merge CNN's pre-softmax scores.
#[derive(Clone, Copy, Debug)]
pub struct HeadView<'n> {
    net: &'n DualHeadNetwork,
    mode: HeadMode,
}

impl HeadView<'_> {
    pub fn mode(&self) -> HeadMode {
        self.mode
    }
}

impl Model for HeadView<'_> {
    fn logits<'a>(&'a self, pass: &mut Pass<'a>, x: Var) -> Result<Var> {
        self.net.scores(pass, x, self.mode)
    }
}
