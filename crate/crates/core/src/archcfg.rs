//! Line-oriented architecture config format.
//!
//! One `key value...` pair per line; `#` starts a comment; blank lines are
//! skipped. Keys:
//!
//! ```text
//! head            aspp | cascade | res2net-seg | wasp      (required)
//! backbone        resnet101-counting | toy-resnet <depth> <width>
//! classes         <n>
//! rates           <r1> <r2> ...
//! branch-width    <channels>            (aspp, cascade, wasp)
//! head-out        <channels>
//! fusion          sum | concat          (aspp only)
//! gap-branch      on | off              (wasp only)
//! scales          <n>                   (res2net-seg only)
//! se-reduction    <n>                   (res2net-seg only)
//! decoder-width   <channels>
//! decoder-dropout <p>
//! ```
//!
//! Unknown keys, duplicate keys, and keys that do not apply to the chosen
//! head are errors. Omitted keys take the documented defaults. Parsing a
//! serialized config reproduces the config exactly.

use crate::error::{Error, Result};
use crate::graph::{
    AsppConfig, BackboneKind, CascadeConfig, DecoderConfig, Fusion, HeadConfig, NetworkConfig,
    Res2netSegConfig, WaspConfig,
};

fn conf(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| conf(line, format!("{key}: expected an integer, got {v:?}")))
}

pub fn parse_network_config(text: &str) -> Result<NetworkConfig> {
    let mut pairs: Vec<(usize, String, Vec<String>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace().map(str::to_string);
        let key = tokens.next().unwrap();
        let values: Vec<String> = tokens.collect();
        if values.is_empty() {
            return Err(conf(line_no, format!("key {key:?} has no value")));
        }
        if pairs.iter().any(|(_, k, _)| *k == key) {
            return Err(conf(line_no, format!("duplicate key {key:?}")));
        }
        pairs.push((line_no, key, values));
    }

    let get = |key: &str| pairs.iter().find(|(_, k, _)| k == key);
    let (_, _, head_vals) = get("head").ok_or_else(|| Error::Config("missing 'head' key".into()))?;
    let head_kind = head_vals[0].as_str();

    let known_for_head: &[&str] = match head_kind {
        "aspp" => &[
            "head", "backbone", "classes", "rates", "branch-width", "head-out", "fusion",
            "decoder-width", "decoder-dropout",
        ],
        "cascade" | "wasp" => &[
            "head", "backbone", "classes", "rates", "branch-width", "head-out", "gap-branch",
            "decoder-width", "decoder-dropout",
        ],
        "res2net-seg" => &[
            "head", "backbone", "classes", "rates", "head-out", "scales", "se-reduction",
            "decoder-width", "decoder-dropout",
        ],
        other => {
            let (line, _, _) = get("head").unwrap();
            return Err(conf(*line, format!("unknown head kind {other:?}")));
        }
    };
    // gap-branch applies to wasp only even though cascade shares the list shape
    for (line, key, _) in &pairs {
        if !known_for_head.contains(&key.as_str()) {
            return Err(conf(
                *line,
                format!("unknown key {key:?} (or not valid for head {head_kind:?})"),
            ));
        }
        if key == "gap-branch" && head_kind != "wasp" {
            return Err(conf(*line, format!("key 'gap-branch' only applies to head 'wasp'")));
        }
    }

    let backbone = match get("backbone") {
        None => BackboneKind::Resnet101Counting,
        Some((line, _, vals)) => match vals[0].as_str() {
            "resnet101-counting" => {
                if vals.len() != 1 {
                    return Err(conf(*line, "backbone resnet101-counting takes no arguments"));
                }
                BackboneKind::Resnet101Counting
            }
            "toy-resnet" => {
                if vals.len() != 3 {
                    return Err(conf(*line, "backbone toy-resnet needs <depth> <width>"));
                }
                BackboneKind::ToyResnet {
                    depth: parse_usize(*line, "backbone depth", &vals[1])?,
                    width: parse_usize(*line, "backbone width", &vals[2])?,
                }
            }
            other => return Err(conf(*line, format!("unknown backbone {other:?}"))),
        },
    };
    let in_ch = backbone.out_channels();

    let classes = match get("classes") {
        None => 21,
        Some((line, _, vals)) => parse_usize(*line, "classes", &vals[0])?,
    };
    let rates: Option<Vec<usize>> = match get("rates") {
        None => None,
        Some((line, _, vals)) => Some(
            vals.iter()
                .map(|v| parse_usize(*line, "rates", v))
                .collect::<Result<_>>()?,
        ),
    };
    let branch_width = match get("branch-width") {
        None => None,
        Some((line, _, vals)) => Some(parse_usize(*line, "branch-width", &vals[0])?),
    };
    let head_out = match get("head-out") {
        None => 256,
        Some((line, _, vals)) => parse_usize(*line, "head-out", &vals[0])?,
    };
    let decoder_width = match get("decoder-width") {
        None => 128,
        Some((line, _, vals)) => parse_usize(*line, "decoder-width", &vals[0])?,
    };
    let decoder_dropout = match get("decoder-dropout") {
        None => 0.5,
        Some((line, _, vals)) => vals[0]
            .parse::<f32>()
            .map_err(|_| conf(*line, format!("decoder-dropout: bad float {:?}", vals[0])))?,
    };

    let head = match head_kind {
        "aspp" => {
            let fusion = match get("fusion") {
                None => Fusion::Sum,
                Some((line, _, vals)) => match vals[0].as_str() {
                    "sum" => Fusion::Sum,
                    "concat" => Fusion::Concat,
                    other => return Err(conf(*line, format!("fusion: expected sum or concat, got {other:?}"))),
                },
            };
            HeadConfig::Aspp(AsppConfig {
                in_ch,
                branch_ch: branch_width.unwrap_or(256),
                out_ch: head_out,
                rates: rates.unwrap_or_else(|| vec![6, 12, 18, 24]),
                fusion,
            })
        }
        "cascade" => HeadConfig::Cascade(CascadeConfig {
            in_ch,
            branch_ch: branch_width.unwrap_or(256),
            out_ch: head_out,
            rates: rates.unwrap_or_else(|| vec![6, 12, 18, 24]),
        }),
        "wasp" => {
            let gap_branch = match get("gap-branch") {
                None => true,
                Some((line, _, vals)) => match vals[0].as_str() {
                    "on" => true,
                    "off" => false,
                    other => return Err(conf(*line, format!("gap-branch: expected on or off, got {other:?}"))),
                },
            };
            HeadConfig::Wasp(WaspConfig {
                in_ch,
                branch_ch: branch_width.unwrap_or(224),
                out_ch: head_out,
                rates: rates.unwrap_or_else(|| vec![6, 12, 18, 24]),
                gap_branch,
            })
        }
        "res2net-seg" => {
            let scales = match get("scales") {
                None => 4,
                Some((line, _, vals)) => parse_usize(*line, "scales", &vals[0])?,
            };
            let se_reduction = match get("se-reduction") {
                None => 16,
                Some((line, _, vals)) => parse_usize(*line, "se-reduction", &vals[0])?,
            };
            HeadConfig::Res2netSeg(Res2netSegConfig {
                in_ch,
                scales,
                rates: rates.unwrap_or_else(|| vec![2, 4, 6, 8]),
                se_reduction,
                out_ch: head_out,
            })
        }
        _ => unreachable!("validated above"),
    };

    Ok(NetworkConfig {
        decoder: DecoderConfig {
            score_ch: head.out_ch(),
            lowlevel_ch: backbone.lowlevel_channels(),
            num_classes: classes,
            conv_ch: decoder_width,
            dropout: decoder_dropout,
        },
        backbone,
        head,
    })
}

pub fn serialize_network_config(cfg: &NetworkConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("head {}\n", cfg.head.kind_name()));
    match &cfg.backbone {
        BackboneKind::Resnet101Counting => out.push_str("backbone resnet101-counting\n"),
        BackboneKind::ToyResnet { depth, width } => {
            out.push_str(&format!("backbone toy-resnet {depth} {width}\n"))
        }
    }
    out.push_str(&format!("classes {}\n", cfg.decoder.num_classes));
    let rates: Vec<String> = cfg.head.rates().iter().map(|r| r.to_string()).collect();
    out.push_str(&format!("rates {}\n", rates.join(" ")));
    match &cfg.head {
        HeadConfig::Aspp(c) => {
            out.push_str(&format!("branch-width {}\n", c.branch_ch));
            out.push_str(&format!("head-out {}\n", c.out_ch));
            out.push_str(&format!(
                "fusion {}\n",
                match c.fusion {
                    Fusion::Sum => "sum",
                    Fusion::Concat => "concat",
                }
            ));
        }
        HeadConfig::Cascade(c) => {
            out.push_str(&format!("branch-width {}\n", c.branch_ch));
            out.push_str(&format!("head-out {}\n", c.out_ch));
        }
        HeadConfig::Wasp(c) => {
            out.push_str(&format!("branch-width {}\n", c.branch_ch));
            out.push_str(&format!("head-out {}\n", c.out_ch));
            out.push_str(&format!(
                "gap-branch {}\n",
                if c.gap_branch { "on" } else { "off" }
            ));
        }
        HeadConfig::Res2netSeg(c) => {
            out.push_str(&format!("head-out {}\n", c.out_ch));
            out.push_str(&format!("scales {}\n", c.scales));
            out.push_str(&format!("se-reduction {}\n", c.se_reduction));
        }
    }
    out.push_str(&format!("decoder-width {}\n", cfg.decoder.conv_ch));
    out.push_str(&format!("decoder-dropout {}\n", cfg.decoder.dropout));
    out
}
