//! Plain-text renderings: reals with 17 significant digits and the small
//! amount of JSON the demo dump needs.

use std::fmt::Write as _;

use crate::tensor::Tensor;

/// A real with 17 significant digits, enough to round-trip any `f64`.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Row-major nested JSON array of `t` viewed with shape `dims`, e.g. a
/// `[T, C, 1]` map as `T` rows of `C` values.
pub fn json_array(t: &Tensor, dims: &[usize]) -> String {
    assert_eq!(dims.iter().product::<usize>(), t.len(), "view must cover the tensor");
    let mut out = String::with_capacity(t.len() * 24);
    nest(&mut out, dims, t.data());
    out
}

fn nest(out: &mut String, dims: &[usize], data: &[f64]) {
    match dims {
        [] => out.push_str(&real(data[0])),
        [first, rest @ ..] => {
            let stride = data.len() / first;
            out.push('[');
            for i in 0..*first {
                if i > 0 {
                    out.push(',');
                }
                nest(out, rest, &data[i * stride..(i + 1) * stride]);
            }
            out.push(']');
        }
    }
}

/// Minimal JSON string escaping.
pub fn json_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub fn json_dims(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for x in [0.1, 1.0 / 3.0, 5e-324, 0.6816997421945262, -2.5e300] {
            assert_eq!(real(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(real(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn nested_views() {
        let t = Tensor::from_fn(&[2, 3, 1], |i| i as f64).unwrap();
        let s = json_array(&t, &[2, 3]);
        assert!(s.starts_with("[[0.0") && s.matches('[').count() == 3, "{s}");
        let g = Tensor::new(&[2, 1], vec![0.5, 0.25]).unwrap();
        assert_eq!(json_array(&g, &[2]), "[5.0000000000000000e-1,2.5000000000000000e-1]");
        assert_eq!(json_array(&Tensor::scalar(1.0), &[1]), "[1.0000000000000000e0]");
    }

    #[test]
    fn strings_are_escaped() {
        assert_eq!(json_string("a\"b\\c\n"), r#""a\"b\\c\n""#);
    }
}
