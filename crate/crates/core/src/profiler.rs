//! Parameter and multiply-accumulate counting per layer and per component,
//! and a wall-clock timing harness.
//!
//! Counting convention (batch 1, exact integers):
//! - conv1d: params `Cout·(Cin/g)·K (+Cout)`, MACs `Cout·(Cin/g)·K·Lout`
//! - conv_transpose1d: params `Cin·Cout·K (+Cout)`, MACs `Cin·Cout·K·Lin` per
//!   input it is applied to
//! - channel_norm: params `2C`, MACs `4·C·L`
//! - prelu: params `C`; prelu, relu, sigmoid, add and elementwise mul: MACs
//!   equal the element count
//! - split_masks: free

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv1d_output_len, conv_transpose1d_output_len, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{bind_params, forward_on_tape, Component, LayerKind, ModelGraph, Source};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    pub kind: LayerKind,
    pub component: Component,
    pub params: u64,
    pub macs: u64,
    pub out_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub component: Component,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub input_length: usize,
    pub layers: Vec<LayerProfile>,
    /// Always encoder, separator, decoder in that order.
    pub components: Vec<ComponentProfile>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ProfileReport {
    pub fn component(&self, c: Component) -> ComponentProfile {
        self.components
            .iter()
            .copied()
            .find(|p| p.component == c)
            .unwrap_or(ComponentProfile {
                component: c,
                params: 0,
                macs: 0,
            })
    }

    pub fn params_ratio(&self, c: Component) -> f64 {
        ratio(self.component(c).params, self.total_params)
    }

    pub fn macs_ratio(&self, c: Component) -> f64 {
        ratio(self.component(c).macs, self.total_macs)
    }

    /// The Table 1 style summary row for this report.
    pub fn table_row(&self, model: &str) -> TableRow {
        let sm = self.component(Component::Separator);
        TableRow {
            model: model.to_string(),
            total_params: self.total_params as f64,
            total_macs: self.total_macs as f64,
            sm_params: sm.params as f64,
            sm_macs: sm.macs as f64,
            params_ratio: self.params_ratio(Component::Separator),
            macs_ratio: self.macs_ratio(Component::Separator),
        }
    }

    /// Per-layer and per-component rows as CSV.
    pub fn layers_csv(&self) -> String {
        let mut s = String::from("name,kind,component,params,macs,out_len\n");
        for l in &self.layers {
            s += &format!(
                "{},{},{},{},{},{}\n",
                l.name,
                l.kind.as_str(),
                l.component.as_str(),
                l.params,
                l.macs,
                l.out_len
            );
        }
        for c in &self.components {
            s += &format!("{},component,{},{},{},\n", c.component.as_str(), c.component.as_str(), c.params, c.macs);
        }
        s += &format!("total,total,total,{},{},\n", self.total_params, self.total_macs);
        s
    }
}

fn ratio(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

/// Whole-model totals next to the separation module's share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub total_params: f64,
    pub total_macs: f64,
    pub sm_params: f64,
    pub sm_macs: f64,
    pub params_ratio: f64,
    pub macs_ratio: f64,
}

pub const TABLE_HEADER: &str =
    "Model,Total Params,Total MACs,Params of the SM,MACs of the SM,Params ratio,MACs ratio";

impl TableRow {
    /// Millions of parameters, GMac and percentages, two decimals each.
    pub fn render(&self) -> String {
        format!(
            "{},{:.2} M,{:.2} GMac,{:.2} M,{:.2} GMac,{:.2}%,{:.2}%",
            self.model,
            self.total_params / 1e6,
            self.total_macs / 1e9,
            self.sm_params / 1e6,
            self.sm_macs / 1e9,
            self.params_ratio * 100.0,
            self.macs_ratio * 100.0
        )
    }

    /// Exact counts, for reports on small models.
    pub fn render_exact(&self) -> String {
        format!(
            "{},{},{},{},{},{:.2}%,{:.2}%",
            self.model,
            self.total_params,
            self.total_macs,
            self.sm_params,
            self.sm_macs,
            self.params_ratio * 100.0,
            self.macs_ratio * 100.0
        )
    }
}

/// Output length of every layer for a `[1, 1, input_length]` mixture.
pub fn layer_lengths(model: &ModelGraph, input_length: usize) -> Result<Vec<usize>> {
    let mut lens: Vec<usize> = Vec::with_capacity(model.layers().len());
    for l in model.layers() {
        let lin = match l.inputs[0] {
            Source::Mixture => input_length,
            Source::Layer { layer, .. } => lens[layer],
        };
        let lout = match l.kind {
            LayerKind::Conv1d | LayerKind::PointwiseConv => {
                conv1d_output_len(lin, l.kernel, l.stride, l.dilation, l.padding).ok_or_else(|| {
                    Error::invalid(format!("input length {input_length} too short for `{}`", l.name))
                })?
            }
            LayerKind::ConvTranspose1d => {
                conv_transpose1d_output_len(lin, l.kernel, l.stride, l.padding)
                    .ok_or_else(|| Error::invalid(format!("`{}` produces no output", l.name)))?;
                input_length
            }
            _ => lin,
        };
        lens.push(lout);
    }
    Ok(lens)
}

pub fn profile(model: &ModelGraph, input_length: usize) -> Result<ProfileReport> {
    if input_length == 0 {
        return Err(Error::invalid("input length must be positive"));
    }
    let lens = layer_lengths(model, input_length)?;
    let mut layers = Vec::with_capacity(lens.len());
    for (i, l) in model.layers().iter().enumerate() {
        let lin = match l.inputs[0] {
            Source::Mixture => input_length,
            Source::Layer { layer, .. } => lens[layer],
        } as u64;
        let lout = lens[i] as u64;
        let (cin, cout, k) = (l.in_channels as u64, l.out_channels as u64, l.kernel as u64);
        let ports = l.inputs.len() as u64;
        let bias = if l.bias { cout } else { 0 };
        let (params, macs) = match l.kind {
            LayerKind::Conv1d | LayerKind::PointwiseConv => {
                let per_out = (cin / l.groups as u64) * k;
                (cout * per_out + bias, cout * per_out * lout)
            }
            LayerKind::ConvTranspose1d => (cin * cout * k + bias, ports * cin * cout * k * lin),
            LayerKind::ChannelNorm => (2 * cin, 4 * cin * lout),
            LayerKind::Prelu => (cin, cin * lout),
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::AddJunction | LayerKind::ElementwiseMul => {
                (0, cout * lout)
            }
            LayerKind::SplitMasks => (0, 0),
        };
        layers.push(LayerProfile {
            name: l.name.clone(),
            kind: l.kind,
            component: l.component,
            params,
            macs,
            out_len: lens[i],
        });
    }
    let components: Vec<ComponentProfile> = Component::ALL
        .iter()
        .map(|&c| ComponentProfile {
            component: c,
            params: layers.iter().filter(|l| l.component == c).map(|l| l.params).sum(),
            macs: layers.iter().filter(|l| l.component == c).map(|l| l.macs).sum(),
        })
        .collect();
    Ok(ProfileReport {
        input_length,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
        components,
    })
}

/// The component with the most MACs; ties go to more parameters, then to
/// the earlier of encoder, separator, decoder.
pub fn heaviest_component(report: &ProfileReport) -> Component {
    let mut best = report.component(Component::Encoder);
    for c in [Component::Separator, Component::Decoder] {
        let p = report.component(c);
        if (p.macs, p.params) > (best.macs, best.params) {
            best = p;
        }
    }
    best.component
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    Forward,
    ForwardBackward,
}

pub const WARMUP_RUNS: usize = 10;

/// Mean wall-clock milliseconds per run over `runs` timed runs, after
/// [`WARMUP_RUNS`] untimed ones, on a fixed deterministic input.
pub fn timing_harness(model: &ModelGraph, input_length: usize, runs: usize, mode: TimingMode) -> Result<f64> {
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    let x: Vec<f32> = (0..input_length)
        .map(|i| 0.5 * (i as f32 * 0.0785).sin() + 0.25 * (i as f32 * 0.61).sin())
        .collect();
    let x = Tensor::new(vec![1, 1, input_length], x)?;
    let once = || -> Result<()> {
        match mode {
            TimingMode::Forward => {
                std::hint::black_box(model.separate(&x, None)?);
            }
            TimingMode::ForwardBackward => {
                let mut tape = Tape::<f32>::new();
                let params = bind_params(&mut tape, model, true)?;
                let input = tape.constant(x.clone())?;
                let y = forward_on_tape(&mut tape, model, &params, input, &Default::default())?;
                let sq = tape.square(y)?;
                let loss = tape.mean(sq)?;
                tape.backward(loss)?;
                std::hint::black_box(&tape);
            }
        }
        Ok(())
    };
    for _ in 0..WARMUP_RUNS {
        once()?;
    }
    let start = Instant::now();
    for _ in 0..runs {
        once()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / runs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_sepnet, SepNetConfig};

    fn synthetic(enc: (u64, u64), sep: (u64, u64), dec: (u64, u64)) -> ProfileReport {
        let comps = [
            (Component::Encoder, enc),
            (Component::Separator, sep),
            (Component::Decoder, dec),
        ];
        ProfileReport {
            input_length: 1,
            layers: Vec::new(),
            components: comps
                .iter()
                .map(|&(component, (params, macs))| ComponentProfile { component, params, macs })
                .collect(),
            total_params: enc.0 + sep.0 + dec.0,
            total_macs: enc.1 + sep.1 + dec.1,
        }
    }

    #[test]
    fn heaviest_component_tie_rules() {
        assert_eq!(heaviest_component(&synthetic((5, 5), (5, 5), (5, 5))), Component::Encoder);
        assert_eq!(heaviest_component(&synthetic((1, 2), (3, 4), (1, 90))), Component::Decoder);
        assert_eq!(heaviest_component(&synthetic((1, 9), (3, 9), (2, 9))), Component::Separator);
    }

    #[test]
    fn table_row_renders_scaled_units() {
        let row = TableRow {
            model: "A-FRCNN-12".into(),
            total_params: 5.13e6,
            total_macs: 28.58e9,
            sm_params: 4.22e6,
            sm_macs: 26.56e9,
            params_ratio: 0.8231,
            macs_ratio: 0.9294,
        };
        assert_eq!(row.render(), "A-FRCNN-12,5.13 M,28.58 GMac,4.22 M,26.56 GMac,82.31%,92.94%");
    }

    #[test]
    fn totals_are_sums_of_rows() {
        let m = build_toy_sepnet(&SepNetConfig::default(), 0).unwrap();
        let r = profile(&m, 16000).unwrap();
        assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total_macs, r.components.iter().map(|c| c.macs).sum::<u64>());
        assert_eq!(r.total_params as usize, m.param_count());
        assert_eq!(heaviest_component(&r), Component::Separator);
        assert!(r.params_ratio(Component::Separator) > 0.8);
        let csv = r.layers_csv();
        assert!(csv.lines().count() == r.layers.len() + 5);
    }

    #[test]
    fn rejects_short_input() {
        let m = build_toy_sepnet(&SepNetConfig::default(), 0).unwrap();
        assert!(profile(&m, 8).is_err());
        assert!(profile(&m, 0).is_err());
        assert!(timing_harness(&m, 64, 0, TimingMode::Forward).is_err());
    }

    #[test]
    fn single_run_timing_is_positive() {
        let cfg = SepNetConfig {
            channels: 4,
            blocks: 1,
            block_channels: 4,
            ..SepNetConfig::default()
        };
        let m = build_toy_sepnet(&cfg, 0).unwrap();
        assert!(timing_harness(&m, 256, 1, TimingMode::Forward).unwrap() > 0.0);
        assert!(timing_harness(&m, 256, 1, TimingMode::ForwardBackward).unwrap() > 0.0);
    }
}
