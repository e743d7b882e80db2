//! Parser for distribution spec strings: `name:key=value,...`.
//!
//! ```text
//! tgauss:d=1,mean=0.4,sigma=0.2
//! gauss:d=2,mean=0;0,sigma=1
//! uniform:d=1
//! mix:w=0.5;0.5,c1=(tgauss:d=1,mean=0.2,sigma=0.1),c2=(uniform:d=1)
//! minejoint:rho=0.5
//! mineprod:rho=0.5
//! ```
//!
//! Vectors use `;`. A scalar `mean` is broadcast to `d` coordinates.

use super::Distribution;
use crate::error::{Error, Result};

struct Arg<'a> {
    key: &'a str,
    key_pos: usize,
    value: &'a str,
    value_pos: usize,
}

struct Parser<'a> {
    input: &'a str,
    /// Offset of `input` within the string the user typed.
    base: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, pos: usize, expected: impl Into<String>) -> Error {
        Error::Parse { input: self.input.to_string(), pos: self.base + pos, expected: expected.into() }
    }

    fn split_args(&self, body: &'a str, body_pos: usize) -> Result<Vec<Arg<'a>>> {
        let mut args = Vec::new();
        if body.is_empty() {
            return Ok(args);
        }
        let bytes = body.as_bytes();
        let mut start = 0;
        let mut depth = 0usize;
        let mut segments = Vec::new();
        for (i, &c) in bytes.iter().enumerate() {
            match c {
                b'(' => depth += 1,
                b')' => {
                    if depth == 0 {
                        return Err(self.err(body_pos + i, "no unmatched ')'"));
                    }
                    depth -= 1;
                }
                b',' if depth == 0 => {
                    segments.push((start, i));
                    start = i + 1;
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(self.err(body_pos + body.len(), "')'"));
        }
        segments.push((start, body.len()));
        for (s, e) in segments {
            let seg = &body[s..e];
            let Some(eq) = seg.find('=') else {
                return Err(self.err(body_pos + s, "key=value"));
            };
            let key = &seg[..eq];
            if key.is_empty() || !key.bytes().all(|c| c.is_ascii_alphanumeric()) {
                return Err(self.err(body_pos + s, "an alphanumeric key"));
            }
            args.push(Arg { key, key_pos: body_pos + s, value: &seg[eq + 1..], value_pos: body_pos + s + eq + 1 });
        }
        Ok(args)
    }

    fn number(&self, text: &str, pos: usize) -> Result<f64> {
        text.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| self.err(pos, "a finite number"))
    }

    fn vector(&self, text: &str, pos: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for part in text.split(';') {
            out.push(self.number(part, pos + offset)?);
            offset += part.len() + 1;
        }
        Ok(out)
    }

    fn count(&self, text: &str, pos: usize) -> Result<usize> {
        match text.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(self.err(pos, "a positive integer")),
        }
    }

    fn parse(&self) -> Result<Distribution> {
        let input = self.input;
        let (name, body, body_pos) = match input.find(':') {
            Some(i) => (&input[..i], &input[i + 1..], i + 1),
            None => (input, "", input.len()),
        };
        let args = self.split_args(body, body_pos)?;
        let allowed: &[&str] = match name {
            "gauss" | "tgauss" => &["d", "mean", "sigma"],
            "uniform" => &["d"],
            "minejoint" | "mineprod" => &["rho"],
            "mix" => &[],
            _ => return Err(self.err(0, "a distribution name (gauss, tgauss, uniform, mix, minejoint, mineprod)")),
        };
        let mut seen: Vec<&str> = Vec::new();
        for a in &args {
            let ok = if name == "mix" {
                a.key == "w" || (a.key.starts_with('c') && a.key[1..].parse::<usize>().is_ok())
            } else {
                allowed.contains(&a.key)
            };
            if !ok {
                let expected = if name == "mix" {
                    "key w or c<index>".to_string()
                } else {
                    format!("one of the keys {}", allowed.join(", "))
                };
                return Err(self.err(a.key_pos, expected));
            }
            if seen.contains(&a.key) {
                return Err(self.err(a.key_pos, format!("no repeated key `{}`", a.key)));
            }
            seen.push(a.key);
        }
        let get = |k: &str| args.iter().find(|a| a.key == k);
        let end = input.len();
        let require = |k: &str| get(k).ok_or_else(|| self.err(end, format!("key `{k}`")));

        match name {
            "gauss" | "tgauss" => {
                let mean_arg = require("mean")?;
                let mut mean = self.vector(mean_arg.value, mean_arg.value_pos)?;
                let d = match get("d") {
                    Some(a) => self.count(a.value, a.value_pos)?,
                    None => mean.len(),
                };
                if mean.len() == 1 && d > 1 {
                    mean = vec![mean[0]; d];
                } else if mean.len() != d {
                    return Err(self.err(mean_arg.value_pos, format!("{d} mean coordinates")));
                }
                let s = require("sigma")?;
                let sigma = self.number(s.value, s.value_pos)?;
                let built = if name == "gauss" {
                    Distribution::gaussian(mean, sigma)
                } else {
                    Distribution::truncated_gaussian(mean, sigma)
                };
                built.map_err(|_| self.err(s.value_pos, "a positive sigma"))
            }
            "uniform" => {
                let d = match get("d") {
                    Some(a) => self.count(a.value, a.value_pos)?,
                    None => 1,
                };
                Distribution::uniform(d)
            }
            "minejoint" | "mineprod" => {
                let a = require("rho")?;
                let rho = self.number(a.value, a.value_pos)?;
                if rho.abs() >= 1.0 {
                    return Err(self.err(a.value_pos, "rho with |rho| < 1"));
                }
                if name == "minejoint" {
                    Distribution::mine_joint(rho)
                } else {
                    Distribution::mine_product(rho)
                }
            }
            "mix" => {
                let w = require("w")?;
                let weights = self.vector(w.value, w.value_pos)?;
                let mut components = Vec::new();
                for i in 1..=weights.len() {
                    let key = format!("c{i}");
                    let a = get(&key).ok_or_else(|| self.err(end, format!("key `{key}`")))?;
                    let v = a.value;
                    if !(v.starts_with('(') && v.ends_with(')') && v.len() >= 2) {
                        return Err(self.err(a.value_pos, "a parenthesized component spec"));
                    }
                    let inner = Parser { input: &v[1..v.len() - 1], base: self.base + a.value_pos + 1 };
                    components.push(inner.parse().map_err(|e| match e {
                        Error::Parse { pos, expected, .. } => {
                            Error::Parse { input: self.input.to_string(), pos, expected }
                        }
                        other => other,
                    })?);
                }
                if args.len() != weights.len() + 1 {
                    let extra = args
                        .iter()
                        .find(|a| {
                            a.key != "w" && a.key[1..].parse::<usize>().map_or(true, |i| i > weights.len() || i == 0)
                        })
                        .map_or(end, |a| a.key_pos);
                    return Err(self.err(extra, format!("exactly {} components", weights.len())));
                }
                Distribution::mixture(components, weights)
                    .map_err(|e| self.err(w.value_pos, format!("valid mixture weights ({e})")))
            }
            _ => unreachable!(),
        }
    }
}

/// Parses a distribution spec string, reporting the byte offset and the
/// expected token on failure.
pub fn parse_distribution(input: &str) -> Result<Distribution> {
    Parser { input, base: 0 }.parse().map_err(|e| match e {
        Error::Parse { pos, expected, .. } => Error::Parse { input: input.to_string(), pos, expected },
        other => other,
    })
}
