//! Plain-text net format for reproducibility audits.
//!
//! ```text
//! w2sg-net 1
//! head softmax 4 1.0000000000000000e-2
//! layer 0 16 8 relu
//! weights <out*in values, row-major>
//! bias <out values>
//! ...
//! ```
//!
//! Every float carries 17 significant digits, so a round trip is bitwise.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};

use super::{Activation, Layer, LayeredNet, OutputHead, ScalarLink};
use crate::error::{Error, Result};

const MAGIC: &str = "w2sg-net 1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn net_to_text(net: &LayeredNet) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    match net.head() {
        OutputHead::None => writeln!(out, "head none").unwrap(),
        OutputHead::Softmax { classes, floor } => writeln!(out, "head softmax {classes} {}", fmt_f64(floor)).unwrap(),
        OutputHead::ScalarPositive { link, floor } => {
            let link = match link {
                ScalarLink::Linear => "linear",
                ScalarLink::Logistic => "logistic",
            };
            writeln!(out, "head scalar-positive {link} {}", fmt_f64(floor)).unwrap()
        }
    }
    for (i, layer) in net.layers().iter().enumerate() {
        let act = match layer.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        writeln!(out, "layer {i} {} {} {act}", layer.output_dim(), layer.input_dim()).unwrap();
        let weights: Vec<String> = layer.weight.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "weights {}", weights.join(" ")).unwrap();
        let bias: Vec<String> = layer.bias.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "bias {}", bias.join(" ")).unwrap();
    }
    out
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Contract(format!("net text line {line}: {msg}"))
}

fn parse_values(line_no: usize, rest: &[&str], expected: usize) -> Result<Vec<f64>> {
    if rest.len() != expected {
        return Err(parse_err(line_no, format!("expected {expected} values, found {}", rest.len())));
    }
    rest.iter().map(|t| t.parse::<f64>().map_err(|e| parse_err(line_no, e))).collect()
}

pub fn net_from_text(text: &str) -> Result<LayeredNet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((n, other)) => return Err(parse_err(n, format!("bad header {other:?}"))),
        None => return Err(parse_err(0, "empty input")),
    }
    let (n, head_line) = lines.next().ok_or_else(|| parse_err(1, "missing head line"))?;
    let tokens: Vec<&str> = head_line.split_whitespace().collect();
    let head = match tokens.as_slice() {
        ["head", "none"] => OutputHead::None,
        ["head", "softmax", k, floor] => OutputHead::Softmax {
            classes: k.parse().map_err(|e| parse_err(n, e))?,
            floor: floor.parse().map_err(|e| parse_err(n, e))?,
        },
        ["head", "scalar-positive", link, floor] => OutputHead::ScalarPositive {
            link: match *link {
                "linear" => ScalarLink::Linear,
                "logistic" => ScalarLink::Logistic,
                other => return Err(parse_err(n, format!("unknown link {other}"))),
            },
            floor: floor.parse().map_err(|e| parse_err(n, e))?,
        },
        _ => return Err(parse_err(n, format!("bad head line {head_line:?}"))),
    };

    let mut layers = Vec::new();
    while let Some((n, line)) = lines.next() {
        let t: Vec<&str> = line.split_whitespace().collect();
        let ["layer", idx, out, inp, act] = t.as_slice() else {
            return Err(parse_err(n, format!("expected layer record, got {line:?}")));
        };
        if idx.parse::<usize>().ok() != Some(layers.len()) {
            return Err(parse_err(n, "layer index out of order"));
        }
        let out: usize = out.parse().map_err(|e| parse_err(n, e))?;
        let inp: usize = inp.parse().map_err(|e| parse_err(n, e))?;
        let activation = match *act {
            "relu" => Activation::Relu,
            "identity" => Activation::Identity,
            other => return Err(parse_err(n, format!("unknown activation {other}"))),
        };
        let (wn, wline) = lines.next().ok_or_else(|| parse_err(n, "missing weights"))?;
        let wt: Vec<&str> = wline.split_whitespace().collect();
        if wt.first() != Some(&"weights") {
            return Err(parse_err(wn, "expected weights record"));
        }
        let weights = parse_values(wn, &wt[1..], out * inp)?;
        let (bn, bline) = lines.next().ok_or_else(|| parse_err(wn, "missing bias"))?;
        let bt: Vec<&str> = bline.split_whitespace().collect();
        if bt.first() != Some(&"bias") {
            return Err(parse_err(bn, "expected bias record"));
        }
        let bias = parse_values(bn, &bt[1..], out)?;
        layers.push(Layer {
            weight: Array2::from_shape_vec((out, inp), weights).map_err(|e| parse_err(wn, e))?,
            bias: Array1::from(bias),
            activation,
        });
    }
    LayeredNet::new(layers, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpnet::{init_net, perturb_net, ArchSpec};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip_is_bitwise(seed in any::<u64>(), depth in 1usize..4, sigma in 0.0f64..5.0) {
            let spec = ArchSpec { head: OutputHead::Softmax { classes: 3, floor: 0.01 }, ..ArchSpec::representation(5, 3, depth) };
            let net = perturb_net(&init_net(&spec, seed).unwrap(), sigma, seed ^ 1).unwrap();
            let back = net_from_text(&net_to_text(&net)).unwrap();
            prop_assert_eq!(back, net);
        }
    }

    #[test]
    fn rejects_truncated_records() {
        let net = init_net(&ArchSpec::representation(2, 2, 1), 0).unwrap();
        let text = net_to_text(&net);
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(net_from_text(&truncated).is_err());
        assert!(net_from_text("not a net").is_err());
    }
}
