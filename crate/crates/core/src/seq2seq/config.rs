use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention block that can carry a prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::Cross];

    pub fn tag(self) -> &'static str {
        match self {
            Site::EncoderSelf => "enc_self",
            Site::DecoderSelf => "dec_self",
            Site::Cross => "cross",
        }
    }
}

/// Which attention sites receive prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixPositions {
    pub encoder_self: bool,
    pub decoder_self: bool,
    pub cross: bool,
}

impl PrefixPositions {
    pub const DEC: Self = Self {
        encoder_self: false,
        decoder_self: true,
        cross: false,
    };
    pub const ENC_DEC: Self = Self {
        encoder_self: true,
        decoder_self: true,
        cross: false,
    };
    pub const ALL: Self = Self {
        encoder_self: true,
        decoder_self: true,
        cross: true,
    };
    pub const NONE: Self = Self {
        encoder_self: false,
        decoder_self: false,
        cross: false,
    };

    pub fn contains(self, site: Site) -> bool {
        match site {
            Site::EncoderSelf => self.encoder_self,
            Site::DecoderSelf => self.decoder_self,
            Site::Cross => self.cross,
        }
    }

    pub fn sites(self) -> Vec<Site> {
        Site::ALL.into_iter().filter(|s| self.contains(*s)).collect()
    }

    /// Short label: `Dec`, `Enc+Dec`, `Enc+Dec+Cross`, ...
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.encoder_self {
            parts.push("Enc");
        }
        if self.decoder_self {
            parts.push("Dec");
        }
        if self.cross {
            parts.push("Cross");
        }
        if parts.is_empty() {
            return "None".into();
        }
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut p = Self::NONE;
        if s.eq_ignore_ascii_case("none") {
            return Ok(p);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_lowercase().as_str() {
                "enc" => p.encoder_self = true,
                "dec" => p.decoder_self = true,
                "cross" => p.cross = true,
                other => {
                    return Err(Error::InvalidParameter(format!("prefix position `{other}`")))
                }
            }
        }
        Ok(p)
    }
}

/// Shape of the encoder-decoder and its latent attachments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Prefix vectors per head and site; 0 disables prefixes.
    pub prefix_len: usize,
    pub prefix_positions: PrefixPositions,
    pub latent_dim: usize,
    pub dropout_rate: f64,
    /// Hidden width of the prior / posterior networks.
    pub latent_hidden: usize,
    /// Hidden width of each latent-to-prefix network.
    pub prefix_hidden: usize,
    /// Output projection shares the token embedding matrix.
    pub tie_output: bool,
}

/// Prefix length used by the text of the reference experiments.
pub const ALT_PREFIX_LEN: usize = 30;

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 64,
            max_seq_len: 160,
            prefix_len: 50,
            prefix_positions: PrefixPositions::ALL,
            latent_dim: 32,
            dropout_rate: 0.0,
            latent_hidden: 32,
            prefix_hidden: 16,
            tie_output: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 || self.latent_dim == 0 {
            return bad("max_seq_len and latent_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Sites that actually carry prefixes (none when `prefix_len == 0`).
    pub fn active_sites(&self) -> Vec<Site> {
        if self.prefix_len == 0 {
            return Vec::new();
        }
        self.prefix_positions.sites()
    }

    pub fn layers_at(&self, site: Site) -> usize {
        match site {
            Site::EncoderSelf => self.n_enc_layers,
            Site::DecoderSelf | Site::Cross => self.n_dec_layers,
        }
    }

    /// Number of scalars in the learned base prefixes:
    /// for each active site and layer, `2 × n_heads × prefix_len × d_head`.
    pub fn prefix_param_count(&self) -> usize {
        self.active_sites()
            .into_iter()
            .map(|s| self.layers_at(s) * 2 * self.n_heads * self.prefix_len * self.d_head())
            .sum()
    }
}
