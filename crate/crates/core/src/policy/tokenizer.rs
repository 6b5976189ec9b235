//! Uniform action discretization over [-1, 1].

/// Result of tokenizing a continuous chunk. `clamped` counts inputs that
/// fell outside [-1, 1] and were clamped before binning.
#[derive(Debug, Clone)]
pub struct TokenizedChunk {
    pub tokens: Vec<u16>,
    pub clamped: usize,
}

/// Map one value to its bin; out-of-range inputs clamp to the edge bins.
pub fn tokenize_value(x: f64, vocab: usize) -> (u16, bool) {
    let clamped = !((-1.0..=1.0).contains(&x));
    let x = x.clamp(-1.0, 1.0);
    let bin = (((x + 1.0) * 0.5) * vocab as f64).floor() as isize;
    let bin = bin.clamp(0, vocab as isize - 1);
    (bin as u16, clamped)
}

/// Bin center of `token`.
pub fn detokenize_value(token: u16, vocab: usize) -> f64 {
    (2.0 * token as f64 + 1.0) / vocab as f64 - 1.0
}

/// Tokenize a flat H x D chunk.
pub fn tokenize_actions(chunk: &[f64], vocab: usize) -> TokenizedChunk {
    let mut tokens = Vec::with_capacity(chunk.len());
    let mut clamped = 0;
    for &x in chunk {
        let (t, c) = tokenize_value(x, vocab);
        tokens.push(t);
        if c {
            clamped += 1;
        }
    }
    TokenizedChunk { tokens, clamped }
}

/// Bin centers for a flat token chunk.
pub fn detokenize(tokens: &[u16], vocab: usize) -> Vec<f64> {
    tokens.iter().map(|&t| detokenize_value(t, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn center_and_boundary_bins() {
        assert_eq!(tokenize_value(0.0, 21).0, 10);
        assert_eq!(tokenize_value(-1.0, 21).0, 0);
        assert_eq!(tokenize_value(1.0, 21).0, 20);
        assert_eq!(detokenize_value(10, 21), 0.0);
    }

    #[test]
    fn out_of_range_clamps_and_counts() {
        let t = tokenize_actions(&[-3.0, 0.2, 1.5], 21);
        assert_eq!(t.tokens[0], 0);
        assert_eq!(t.tokens[2], 20);
        assert_eq!(t.clamped, 2);
    }

    #[test]
    fn round_trip_error_is_within_half_bin() {
        let v = 21;
        let mut rng = crate::rng::stream_rng(0, "tok-roundtrip");
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-1.0..=1.0);
            let (t, _) = tokenize_value(x, v);
            let back = detokenize_value(t, v);
            assert!((x - back).abs() <= 1.0 / v as f64 + 1e-12, "x = {x}");
        }
    }
}
