//! Architecture descriptions and the SIC/LIC/teacher presets.

use crate::error::{Error, Result};

/// One inception block: four parallel branches concatenated on channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InceptionBlockSpec {
    pub filters_1x1: usize,
    pub filters_3x3: usize,
    pub filters_5x5: usize,
    pub filters_pool: usize,
    /// 2x2/stride-2 max pool after the block.
    pub pool_after: bool,
}

impl InceptionBlockSpec {
    pub fn new(f1: usize, f3: usize, f5: usize, fp: usize, pool_after: bool) -> Self {
        InceptionBlockSpec {
            filters_1x1: f1,
            filters_3x3: f3,
            filters_5x5: f5,
            filters_pool: fp,
            pool_after,
        }
    }

    /// Output channels = sum of branch filters.
    pub fn output_channels(&self) -> usize {
        self.filters_1x1 + self.filters_3x3 + self.filters_5x5 + self.filters_pool
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub num_classes: usize,
    /// Extra coarse-class head sharing the trunk (multi-task variant).
    pub aux_classes: Option<usize>,
}

/// Full model description: input grid, inception blocks, classifier head(s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    /// [frames, mel_bins, channels]
    pub input_shape: [usize; 3],
    pub blocks: Vec<InceptionBlockSpec>,
    pub head: HeadSpec,
}

impl ArchSpec {
    /// Shallow inception preset: two blocks, ~503 KB of float32 parameters
    /// at 10 classes.
    pub fn sic(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec {
            input_shape,
            blocks: vec![
                InceptionBlockSpec::new(16, 32, 16, 16, true),
                InceptionBlockSpec::new(32, 74, 33, 34, true),
            ],
            head: HeadSpec {
                num_classes,
                aux_classes: None,
            },
        }
    }

    /// Large inception preset: three blocks with more filters, ~3434 KB of
    /// float32 parameters at 10 classes.
    pub fn lic(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec {
            input_shape,
            blocks: vec![
                InceptionBlockSpec::new(24, 48, 24, 24, true),
                InceptionBlockSpec::new(48, 96, 48, 48, true),
                InceptionBlockSpec::new(57, 113, 57, 56, true),
            ],
            head: HeadSpec {
                num_classes,
                aux_classes: None,
            },
        }
    }

    /// Desk-scale teacher: two wide blocks, roughly twice the SIC size.
    pub fn teacher(input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec {
            input_shape,
            blocks: vec![
                InceptionBlockSpec::new(24, 48, 24, 24, true),
                InceptionBlockSpec::new(48, 96, 48, 48, true),
            ],
            head: HeadSpec {
                num_classes,
                aux_classes: None,
            },
        }
    }

    pub fn preset(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        match name {
            "sic" => Ok(Self::sic(input_shape, num_classes)),
            "lic" => Ok(Self::lic(input_shape, num_classes)),
            "teacher" => Ok(Self::teacher(input_shape, num_classes)),
            other => Err(Error::Config(format!("unknown architecture preset '{other}'"))),
        }
    }

    pub fn with_aux_head(mut self, aux_classes: usize) -> Self {
        self.head.aux_classes = Some(aux_classes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "arch input_shape has a zero dimension: {:?}",
                self.input_shape
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("arch needs at least one block".to_string()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters_1x1 == 0 || b.filters_3x3 == 0 || b.filters_5x5 == 0 || b.filters_pool == 0
            {
                return Err(Error::Config(format!(
                    "block {} has a zero filter count",
                    i + 1
                )));
            }
        }
        if self.head.num_classes < 2 {
            return Err(Error::Config(format!(
                "head num_classes must be >= 2, got {}",
                self.head.num_classes
            )));
        }
        if let Some(aux) = self.head.aux_classes {
            if aux < 2 {
                return Err(Error::Config(format!("aux head classes must be >= 2, got {aux}")));
            }
        }
        // spatial extent must survive the per-block 2x2 pooling
        let mut h = self.input_shape[0];
        let mut w = self.input_shape[1];
        for (i, b) in self.blocks.iter().enumerate() {
            if h < 5 || w < 5 {
                return Err(Error::Config(format!(
                    "input {:?} too small for the 5x5 branch at block {}",
                    self.input_shape,
                    i + 1
                )));
            }
            if b.pool_after {
                h /= 2;
                w /= 2;
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::Config(
                "input collapses to zero extent after pooling".to_string(),
            ));
        }
        Ok(())
    }

    /// Channels entering block `i` (0-based).
    pub fn channels_into(&self, block: usize) -> usize {
        if block == 0 {
            self.input_shape[2]
        } else {
            self.blocks[block - 1].output_channels()
        }
    }

    pub fn trunk_output_channels(&self) -> usize {
        self.blocks.last().map(|b| b.output_channels()).unwrap_or(0)
    }

    /// Total scalar parameter count (kernels + biases, all heads).
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            let c_in = self.channels_into(i);
            total += c_in * b.filters_1x1 + b.filters_1x1;
            total += 9 * c_in * b.filters_3x3 + b.filters_3x3;
            total += 25 * c_in * b.filters_5x5 + b.filters_5x5;
            total += c_in * b.filters_pool + b.filters_pool;
        }
        let c = self.trunk_output_channels();
        total += c * self.head.num_classes + self.head.num_classes;
        if let Some(aux) = self.head.aux_classes {
            total += c * aux + aux;
        }
        total
    }

    /// Flat `key = value` encoding for the checkpoint container.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "input_shape = {},{},{}\n",
            self.input_shape[0], self.input_shape[1], self.input_shape[2]
        ));
        for b in &self.blocks {
            out.push_str(&format!(
                "block = {},{},{},{},{}\n",
                b.filters_1x1,
                b.filters_3x3,
                b.filters_5x5,
                b.filters_pool,
                if b.pool_after { "pool" } else { "nopool" }
            ));
        }
        out.push_str(&format!("classes = {}\n", self.head.num_classes));
        if let Some(aux) = self.head.aux_classes {
            out.push_str(&format!("aux = {aux}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut blocks = Vec::new();
        let mut classes = None;
        let mut aux = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad arch line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "input_shape" => {
                    let dims: Vec<usize> = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Checkpoint(format!("bad input_shape '{value}': {e}")))?;
                    if dims.len() != 3 {
                        return Err(Error::Checkpoint(format!("input_shape wants 3 dims, got {value}")));
                    }
                    input_shape = Some([dims[0], dims[1], dims[2]]);
                }
                "block" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 5 {
                        return Err(Error::Checkpoint(format!("bad block spec '{value}'")));
                    }
                    let nums: Vec<usize> = parts[..4]
                        .iter()
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Checkpoint(format!("bad block spec '{value}': {e}")))?;
                    blocks.push(InceptionBlockSpec::new(
                        nums[0],
                        nums[1],
                        nums[2],
                        nums[3],
                        parts[4] == "pool",
                    ));
                }
                "classes" => {
                    classes = Some(value.parse::<usize>().map_err(|e| {
                        Error::Checkpoint(format!("bad classes '{value}': {e}"))
                    })?);
                }
                "aux" => {
                    aux = Some(value.parse::<usize>().map_err(|e| {
                        Error::Checkpoint(format!("bad aux '{value}': {e}"))
                    })?);
                }
                other => return Err(Error::Checkpoint(format!("unknown arch key '{other}'"))),
            }
        }
        let spec = ArchSpec {
            input_shape: input_shape.ok_or_else(|| Error::Checkpoint("arch missing input_shape".to_string()))?,
            blocks,
            head: HeadSpec {
                num_classes: classes.ok_or_else(|| Error::Checkpoint("arch missing classes".to_string()))?,
                aux_classes: aux,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sic_has_two_blocks_lic_three() {
        assert_eq!(ArchSpec::sic([64, 64, 3], 10).blocks.len(), 2);
        assert_eq!(ArchSpec::lic([64, 64, 3], 10).blocks.len(), 3);
    }

    #[test]
    fn preset_param_counts_land_near_reported_sizes() {
        // 503 KB and 3434 KB at 4 bytes/param
        let sic = ArchSpec::sic([64, 64, 3], 10).param_count();
        let sic_kb = sic as f64 * 4.0 / 1024.0;
        assert!((sic_kb - 503.0).abs() < 2.0, "SIC preset is {sic_kb:.1} KB");

        let lic = ArchSpec::lic([64, 64, 3], 10).param_count();
        let lic_kb = lic as f64 * 4.0 / 1024.0;
        assert!((lic_kb - 3434.0).abs() < 5.0, "LIC preset is {lic_kb:.1} KB");
    }

    #[test]
    fn param_count_matches_hand_count_for_toy_block() {
        // one block (2,3,2,2) on 1-channel input, 4 classes:
        // kernels: 1*1*1*2 + 3*3*1*3 + 5*5*1*2 + 1*1*1*2 = 2+27+50+2 = 81
        // biases: 9; head: 9*4 + 4 = 40  (block outputs 9 channels)
        let spec = ArchSpec {
            input_shape: [8, 8, 1],
            blocks: vec![InceptionBlockSpec::new(2, 3, 2, 2, false)],
            head: HeadSpec {
                num_classes: 4,
                aux_classes: None,
            },
        };
        assert_eq!(spec.param_count(), 81 + 9 + 40);
    }

    #[test]
    fn validate_rejects_zero_filters() {
        let mut spec = ArchSpec::sic([32, 32, 3], 10);
        spec.blocks[0].filters_3x3 = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn validate_rejects_tiny_input() {
        let spec = ArchSpec::sic([4, 4, 3], 10);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn arch_text_round_trip() {
        let spec = ArchSpec::sic([20, 32, 3], 10).with_aux_head(3);
        let back = ArchSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(spec, back);
    }
}
