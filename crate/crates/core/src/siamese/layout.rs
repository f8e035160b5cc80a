//! Flat parameter vector layout. Every weight tensor is a named, row-major
//! segment of one `Vec<f64>`, which keeps the optimizer, gradient checks and
//! checkpoints uniform.

use super::SiameseConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Seg {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Seg {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len()]
    }

    pub fn slice_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len()]
    }

    pub fn row<'a>(&self, p: &'a [f64], r: usize) -> &'a [f64] {
        let o = self.off + r * self.cols;
        &p[o..o + self.cols]
    }

    pub fn row_mut<'a>(&self, p: &'a mut [f64], r: usize) -> &'a mut [f64] {
        let o = self.off + r * self.cols;
        &mut p[o..o + self.cols]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LstmSeg {
    pub w_ih: Seg,
    pub w_hh: Seg,
    pub b: Seg,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionSeg {
    pub w: Seg,
    pub b: Seg,
    pub v: Seg,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub hidden: usize,
    pub emb: Seg,
    pub fw: LstmSeg,
    pub bw: LstmSeg,
    pub att: Option<AttentionSeg>,
    pub d1w: Seg,
    pub d1b: Seg,
    pub d2w: Seg,
    pub d2b: Seg,
    pub total: usize,
    pub named: Vec<(String, Seg)>,
}

impl Layout {
    pub fn new(vocab_rows: usize, cfg: &SiameseConfig) -> Self {
        let mut named: Vec<(String, Seg)> = Vec::new();
        let mut off = 0;
        let mut seg = |name: &str, rows: usize, cols: usize| {
            let s = Seg { off, rows, cols };
            off += s.len();
            named.push((name.to_string(), s));
            s
        };
        let (e, h) = (cfg.embed_dim, cfg.lstm_hidden);
        let emb = seg("embedding", vocab_rows, e);
        let mut lstm = |dir: &str| LstmSeg {
            w_ih: seg(&format!("lstm_{dir}.w_ih"), 4 * h, e),
            w_hh: seg(&format!("lstm_{dir}.w_hh"), 4 * h, h),
            b: seg(&format!("lstm_{dir}.bias"), 1, 4 * h),
        };
        let fw = lstm("fw");
        let bw = lstm("bw");
        let att = cfg.use_attention.then(|| AttentionSeg {
            w: seg("attention.w", cfg.attention_units, 2 * h),
            b: seg("attention.bias", 1, cfg.attention_units),
            v: seg("attention.v", 1, cfg.attention_units),
        });
        let d1w = seg("dense1.w", cfg.dense1_units, 2 * h);
        let d1b = seg("dense1.bias", 1, cfg.dense1_units);
        let d2w = seg("dense2.w", cfg.dense2_units, cfg.dense1_units);
        let d2b = seg("dense2.bias", 1, cfg.dense2_units);
        Layout {
            hidden: h,
            emb,
            fw,
            bw,
            att,
            d1w,
            d1b,
            d2w,
            d2b,
            total: off,
            named,
        }
    }
}
