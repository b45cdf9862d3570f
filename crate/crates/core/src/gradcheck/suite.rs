//! The block-level finite-difference suite: one entry per differentiable
//! component, each built at a tiny size with fixed seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check, GradReport, GradcheckConfig};
use crate::autodiff::Graph;
use crate::autoencoder::AutoEncoder;
use crate::blocks::{
    AgentAttention, CrossAttentionFuse, MixerKind, Spade, SpadeResBlock, Vssb, VssbConfig, Vssm, VssmConfig,
};
use crate::color::Sfe;
use crate::error::Result;
use crate::networks::{Discriminator, GeneratorA, GeneratorB, ModelConfig};
use crate::objectives::{
    adversarial_generator_loss, adversarial_losses, feature_consistency_loss, ms_ssim, mse_loss, LossWeights,
    MsSsimConfig, SsimWindow,
};
use crate::params::ParamStore;
use crate::scan2d::Scan2d;
use crate::ssm::{selective_scan, ScanKernel};
use crate::tensor::Tensor;

pub type CheckFn = fn(&GradcheckConfig) -> Result<GradReport>;

/// A named check in the suite.
#[derive(Clone, Copy)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub run: CheckFn,
}

impl std::fmt::Debug for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// Every checked block, each listed once.
pub fn suite() -> Vec<SuiteEntry> {
    let e = |name, run| SuiteEntry { name, run };
    vec![
        e("selective_scan", selective_scan_check as CheckFn),
        e("scan2d", scan2d_check),
        e("vssm", vssm_check),
        e("vssm_conv_mixer", conv_mixer_check),
        e("vssb", vssb_check),
        e("agent_attention", agent_check),
        e("spade", spade_check),
        e("spade_resblock", spade_resblock_check),
        e("cross_attention_fuse", fuse_check),
        e("sfe", sfe_check),
        e("generator_b", generator_b_check),
        e("generator_a", generator_a_check),
        e("critic", critic_check),
        e("loss_mse", mse_check),
        e("loss_ms_ssim", ms_ssim_check),
        e("loss_feature", feature_check),
        e("loss_adversarial_critic", adversarial_critic_check),
        e("loss_adversarial_generator", adversarial_generator_check),
    ]
}

/// Runs `entries` in order, stopping at the first forward error.
pub fn run_suite(entries: &[SuiteEntry], cfg: &GradcheckConfig) -> Result<Vec<GradReport>> {
    entries
        .iter()
        .map(|e| {
            let mut r = (e.run)(cfg)?;
            r.name = e.name.to_string();
            Ok(r)
        })
        .collect()
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + tag)
}

fn unit(shape: &[usize], tag: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.05, 0.95, &mut rng(tag))
}

fn normal(shape: &[usize], tag: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(tag))
}

fn selective_scan_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let (b, l, e, n) = (1, 6, 3, 4);
    let mut r = rng(1);
    let ins = [
        Tensor::randn(&[b, l, e], 1.0, &mut r),
        Tensor::rand_uniform(&[b, l, e], 0.02, 0.6, &mut r),
        Tensor::rand_uniform(&[e, n], -3.0, -0.2, &mut r),
        Tensor::randn(&[b, l, n], 1.0, &mut r),
        Tensor::randn(&[b, l, n], 1.0, &mut r),
        Tensor::randn(&[e], 1.0, &mut r),
    ];
    check("selective_scan", &ParamStore::new(), &ins, cfg, |g, _, x| {
        selective_scan(g, x[0], x[1], x[2], x[3], x[4], x[5], ScanKernel::Sequential)
    })
}

fn scan2d_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = Scan2d::new(&mut store, "scan", 3, 2, true, &mut rng(2))?;
    check("scan2d", &store, &[normal(&[1, 5, 4, 3], 3)], cfg, |g, p, x| {
        m.forward(g, p, x[0])
    })
}

fn vssm_with(mixer: MixerKind, name: &str, cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let mut c = VssmConfig::new(4, 2);
    c.expand = 1;
    c.mixer = mixer;
    let m = Vssm::new(&mut store, "vssm", &c, &mut rng(4))?;
    check(name, &store, &[normal(&[1, 4, 4, 4], 5)], cfg, |g, p, x| {
        m.forward(g, p, x[0])
    })
}

fn vssm_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    vssm_with(MixerKind::Scan, "vssm", cfg)
}

fn conv_mixer_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    vssm_with(MixerKind::Conv, "vssm_conv_mixer", cfg)
}

fn vssb_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let mut c = VssbConfig::new(4, 2);
    c.vssm.expand = 1;
    c.agent_count = 4;
    let m = Vssb::new(&mut store, "vssb", &c, &mut rng(6))?;
    check("vssb", &store, &[normal(&[1, 4, 4, 4], 7)], cfg, |g, p, x| {
        m.forward(g, p, x[0])
    })
}

fn agent_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = AgentAttention::new(&mut store, "agent", 4, 4, &mut rng(8))?;
    check(
        "agent_attention",
        &store,
        &[normal(&[1, 6, 6, 4], 9)],
        cfg,
        |g, p, x| m.forward(g, p, x[0]),
    )
}

fn spade_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = Spade::new(&mut store, "spade", 3, 2, false, &mut rng(10))?;
    let ins = [normal(&[1, 6, 6, 3], 11), normal(&[1, 6, 6, 2], 12)];
    check("spade", &store, &ins, cfg, |g, p, x| m.forward(g, p, x[0], x[1]))
}

fn spade_resblock_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = SpadeResBlock::new(&mut store, "sres", 3, 4, 2, false, &mut rng(13))?;
    let ins = [normal(&[1, 5, 5, 3], 14), normal(&[1, 5, 5, 2], 15)];
    check("spade_resblock", &store, &ins, cfg, |g, p, x| {
        m.forward(g, p, x[0], x[1])
    })
}

fn fuse_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = CrossAttentionFuse::new(&mut store, "fuse", 4, 3, &mut rng(16))?;
    let ins = [normal(&[1, 5, 5, 4], 17), normal(&[1, 5, 5, 3], 18)];
    check("cross_attention_fuse", &store, &ins, cfg, |g, p, x| {
        m.forward(g, p, x[0], x[1])
    })
}

fn sfe_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = Sfe::new(&mut store, "sfe", 4, 2, &mut rng(19))?;
    check("sfe", &store, &[unit(&[1, 6, 6, 1], 20)], cfg, |g, p, x| {
        let o = m.forward(g, p, x[0])?;
        g.concat_last(&[o.x_nir_hsv, o.x_tex, o.x_hsv])
    })
}

fn generator_b_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = GeneratorB::new(&mut store, "gen_b", &ModelConfig::tiny(), &mut rng(21))?;
    check("generator_b", &store, &[unit(&[1, 4, 4, 1], 22)], cfg, |g, p, x| {
        Ok(m.forward(g, p, x[0])?.y_hsv)
    })
}

fn generator_a_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let model = ModelConfig::tiny();
    let nir = unit(&[1, 8, 8, 1], 23);
    // conditioning inputs come from a G_B forward pass
    let mut b_store = ParamStore::new();
    let gen_b = GeneratorB::new(&mut b_store, "gen_b", &model, &mut rng(24))?;
    let g = Graph::new();
    let p = b_store.bind(&g, false);
    let out = gen_b.forward(&g, &p, g.constant(nir.clone()))?;
    let mut ins = vec![nir];
    ins.extend(out.feats.iter().map(|&f| (*g.value(f)).clone()));
    ins.push((*g.value(out.sfe.x_tex)).clone());
    ins.push((*g.value(out.y_hsv)).clone());
    let nf = out.feats.len();

    let mut store = ParamStore::new();
    let m = GeneratorA::new(&mut store, "gen_a", &model, &mut rng(25))?;
    check("generator_a", &store, &ins, cfg, |g, p, x| {
        m.forward(g, p, x[0], &x[1..=nf], x[nf + 1], x[nf + 2])
    })
}

fn critic_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let m = Discriminator::new(&mut store, "disc", [2, 2, 2], &mut rng(26))?;
    check("critic", &store, &[unit(&[1, 16, 16, 3], 27)], cfg, |g, p, x| {
        m.forward(g, p, x[0])
    })
}

fn mse_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let ins = [unit(&[1, 6, 6, 3], 28), unit(&[1, 6, 6, 3], 29)];
    check("loss_mse", &ParamStore::new(), &ins, cfg, |g, _, x| {
        mse_loss(g, x[0], x[1])
    })
}

fn ms_ssim_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    // two scales so the contrast-structure product is exercised
    let ms = MsSsimConfig {
        scales: 2,
        window: SsimWindow { size: 3, sigma: 1.0 },
    };
    let y = unit(&[1, 6, 6, 3], 30);
    let x = y.zip_map(&normal(&[1, 6, 6, 3], 31), |a, n| (a + 0.1 * n).clamp(0.0, 1.0))?;
    check("loss_ms_ssim", &ParamStore::new(), &[x, y], cfg, |g, _, v| {
        ms_ssim(g, v[0], v[1], &ms)
    })
}

fn feature_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let mut store = ParamStore::new();
    let ae = AutoEncoder::new(&mut store, 2, &mut rng(32))?;
    let y = unit(&[1, 6, 6, 3], 33);
    let x = y.zip_map(&normal(&[1, 6, 6, 3], 34), |a, n| (a + 0.1 * n).clamp(0.0, 1.0))?;
    let ms = MsSsimConfig::fit(6, 6)?;
    let w = LossWeights::default();
    check("loss_feature", &store, &[x, y], cfg, |g, p, v| {
        feature_consistency_loss(g, v[0], v[1], |t| ae.encode(g, p, t), &w, &ms)
    })
}

fn adversarial_critic_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    let ins = [normal(&[1, 2, 2, 1], 35), normal(&[1, 2, 2, 1], 36)];
    check("loss_adversarial_critic", &ParamStore::new(), &ins, cfg, |g, _, x| {
        Ok(adversarial_losses(g, x[0], x[1])?.0)
    })
}

fn adversarial_generator_check(cfg: &GradcheckConfig) -> Result<GradReport> {
    check(
        "loss_adversarial_generator",
        &ParamStore::new(),
        &[normal(&[1, 2, 2, 1], 37)],
        cfg,
        |g, _, x| adversarial_generator_loss(g, x[0]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn names_are_unique() {
        let s = suite();
        let names: HashSet<_> = s.iter().map(|e| e.name).collect();
        assert_eq!(names.len(), s.len());
    }
}
