//! The full student/teacher network: ViT backbone, prototype projection head
//! and GSD regression head, wired into one [`ParamSet`] so the optimizer,
//! EMA updates and checkpoints see a single flat parameter list.

use crate::config::RunConfig;
use crate::error::Result;
use crate::nn::head::{DinoHeadConfig, DinoHeadParams, GsdHeadParams};
use crate::nn::optim::{FieldMeta, ParamSet};
use crate::nn::vit::{ViTConfig, VitParams};
use crate::nn::Elem;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub head: DinoHeadConfig,
}

impl ModelConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Result<ModelConfig> {
        cfg.validate()?;
        let vit = ViTConfig {
            variant: cfg.model.variant.clone(),
            patch_size: cfg.model.patch_size,
            embed_dim: cfg.model.embed_dim,
            depth: cfg.model.depth,
            heads: cfg.model.heads,
            mlp_ratio: cfg.model.mlp_ratio,
            use_gsd_token: cfg.model.use_gsd_token,
            pos_grid: cfg.views.global_out / cfg.model.patch_size,
        };
        let head = DinoHeadConfig {
            in_dim: cfg.model.embed_dim,
            hidden_dim: cfg.head.hidden_dim,
            bottleneck_dim: cfg.head.bottleneck_dim,
            prototypes: cfg.head.prototypes,
            tau_s: cfg.head.tau_s,
            tau_t_start: cfg.head.tau_t_start,
            tau_t_end: cfg.head.tau_t_end,
            tau_t_warmup_epochs: cfg.head.tau_t_warmup_epochs,
            center_momentum: cfg.head.center_momentum,
            freeze_proto_epochs: cfg.head.freeze_proto_epochs,
        };
        vit.validate()?;
        head.validate()?;
        Ok(ModelConfig { vit, head })
    }
}

impl<F: Elem> ParamSet<F> for VitParams<F> {
    fn meta(&self) -> Vec<FieldMeta> {
        let mut out = Vec::new();
        let mut push = |name: String, decay: bool, shape: Vec<usize>| {
            out.push(FieldMeta { name, shape, decay });
        };
        push("vit.patch_w".into(), true, self.patch_w.shape().to_vec());
        push("vit.patch_b".into(), false, vec![self.patch_b.len()]);
        push("vit.cls_token".into(), false, vec![self.cls_token.len()]);
        if let Some(g) = &self.gsd_token {
            push("vit.gsd_token".into(), false, vec![g.len()]);
        }
        push(
            "vit.pos_special".into(),
            false,
            self.pos_special.shape().to_vec(),
        );
        push("vit.pos_grid".into(), false, self.pos_grid.shape().to_vec());
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("vit.block{i}.ln1_g"), false, vec![b.ln1_g.len()]);
            push(format!("vit.block{i}.ln1_b"), false, vec![b.ln1_b.len()]);
            push(format!("vit.block{i}.qkv_w"), true, b.qkv_w.shape().to_vec());
            push(format!("vit.block{i}.qkv_b"), false, vec![b.qkv_b.len()]);
            push(
                format!("vit.block{i}.proj_w"),
                true,
                b.proj_w.shape().to_vec(),
            );
            push(format!("vit.block{i}.proj_b"), false, vec![b.proj_b.len()]);
            push(format!("vit.block{i}.ln2_g"), false, vec![b.ln2_g.len()]);
            push(format!("vit.block{i}.ln2_b"), false, vec![b.ln2_b.len()]);
            push(format!("vit.block{i}.fc1_w"), true, b.fc1_w.shape().to_vec());
            push(format!("vit.block{i}.fc1_b"), false, vec![b.fc1_b.len()]);
            push(format!("vit.block{i}.fc2_w"), true, b.fc2_w.shape().to_vec());
            push(format!("vit.block{i}.fc2_b"), false, vec![b.fc2_b.len()]);
        }
        push("vit.norm_g".into(), false, vec![self.norm_g.len()]);
        push("vit.norm_b".into(), false, vec![self.norm_b.len()]);
        out
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        out.push(self.patch_w.as_slice().unwrap());
        out.push(self.patch_b.as_slice().unwrap());
        out.push(self.cls_token.as_slice().unwrap());
        if let Some(g) = &self.gsd_token {
            out.push(g.as_slice().unwrap());
        }
        out.push(self.pos_special.as_slice().unwrap());
        out.push(self.pos_grid.as_slice().unwrap());
        for b in &self.blocks {
            out.push(b.ln1_g.as_slice().unwrap());
            out.push(b.ln1_b.as_slice().unwrap());
            out.push(b.qkv_w.as_slice().unwrap());
            out.push(b.qkv_b.as_slice().unwrap());
            out.push(b.proj_w.as_slice().unwrap());
            out.push(b.proj_b.as_slice().unwrap());
            out.push(b.ln2_g.as_slice().unwrap());
            out.push(b.ln2_b.as_slice().unwrap());
            out.push(b.fc1_w.as_slice().unwrap());
            out.push(b.fc1_b.as_slice().unwrap());
            out.push(b.fc2_w.as_slice().unwrap());
            out.push(b.fc2_b.as_slice().unwrap());
        }
        out.push(self.norm_g.as_slice().unwrap());
        out.push(self.norm_b.as_slice().unwrap());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.patch_w.as_slice_mut().unwrap());
        out.push(self.patch_b.as_slice_mut().unwrap());
        out.push(self.cls_token.as_slice_mut().unwrap());
        if let Some(g) = self.gsd_token.as_mut() {
            out.push(g.as_slice_mut().unwrap());
        }
        out.push(self.pos_special.as_slice_mut().unwrap());
        out.push(self.pos_grid.as_slice_mut().unwrap());
        for b in &mut self.blocks {
            out.push(b.ln1_g.as_slice_mut().unwrap());
            out.push(b.ln1_b.as_slice_mut().unwrap());
            out.push(b.qkv_w.as_slice_mut().unwrap());
            out.push(b.qkv_b.as_slice_mut().unwrap());
            out.push(b.proj_w.as_slice_mut().unwrap());
            out.push(b.proj_b.as_slice_mut().unwrap());
            out.push(b.ln2_g.as_slice_mut().unwrap());
            out.push(b.ln2_b.as_slice_mut().unwrap());
            out.push(b.fc1_w.as_slice_mut().unwrap());
            out.push(b.fc1_b.as_slice_mut().unwrap());
            out.push(b.fc2_w.as_slice_mut().unwrap());
            out.push(b.fc2_b.as_slice_mut().unwrap());
        }
        out.push(self.norm_g.as_slice_mut().unwrap());
        out.push(self.norm_b.as_slice_mut().unwrap());
        out
    }
}

impl<F: Elem> ParamSet<F> for DinoHeadParams<F> {
    fn meta(&self) -> Vec<FieldMeta> {
        vec![
            FieldMeta {
                name: "dino.l1_w".into(),
                shape: self.l1_w.shape().to_vec(),
                decay: true,
            },
            FieldMeta {
                name: "dino.l1_b".into(),
                shape: vec![self.l1_b.len()],
                decay: false,
            },
            FieldMeta {
                name: "dino.l2_w".into(),
                shape: self.l2_w.shape().to_vec(),
                decay: true,
            },
            FieldMeta {
                name: "dino.l2_b".into(),
                shape: vec![self.l2_b.len()],
                decay: false,
            },
            FieldMeta {
                name: "dino.l3_w".into(),
                shape: self.l3_w.shape().to_vec(),
                decay: true,
            },
            FieldMeta {
                name: "dino.l3_b".into(),
                shape: vec![self.l3_b.len()],
                decay: false,
            },
            FieldMeta {
                name: "dino.proto".into(),
                shape: self.proto.shape().to_vec(),
                decay: true,
            },
        ]
    }

    fn slices(&self) -> Vec<&[F]> {
        vec![
            self.l1_w.as_slice().unwrap(),
            self.l1_b.as_slice().unwrap(),
            self.l2_w.as_slice().unwrap(),
            self.l2_b.as_slice().unwrap(),
            self.l3_w.as_slice().unwrap(),
            self.l3_b.as_slice().unwrap(),
            self.proto.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.l1_w.as_slice_mut().unwrap(),
            self.l1_b.as_slice_mut().unwrap(),
            self.l2_w.as_slice_mut().unwrap(),
            self.l2_b.as_slice_mut().unwrap(),
            self.l3_w.as_slice_mut().unwrap(),
            self.l3_b.as_slice_mut().unwrap(),
            self.proto.as_slice_mut().unwrap(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<F: Elem> {
    pub vit: VitParams<F>,
    pub dino: DinoHeadParams<F>,
    pub gsd: Option<GsdHeadParams<F>>,
}

impl<F: Elem> ModelParams<F> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let vit = VitParams::init(&cfg.vit, rng);
        let dino = DinoHeadParams::init(&cfg.head, rng);
        let gsd = cfg
            .vit
            .use_gsd_token
            .then(|| GsdHeadParams::init(cfg.vit.embed_dim));
        ModelParams { vit, dino, gsd }
    }
}

impl<F: Elem> ParamSet<F> for ModelParams<F> {
    fn meta(&self) -> Vec<FieldMeta> {
        let mut out = self.vit.meta();
        out.extend(self.dino.meta());
        if let Some(g) = &self.gsd {
            out.push(FieldMeta {
                name: "gsd.w".into(),
                shape: vec![g.w.len()],
                decay: false,
            });
            out.push(FieldMeta {
                name: "gsd.b".into(),
                shape: vec![1],
                decay: false,
            });
        }
        out
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut out = self.vit.slices();
        out.extend(self.dino.slices());
        if let Some(g) = &self.gsd {
            out.push(g.w.as_slice().unwrap());
            out.push(std::slice::from_ref(&g.b));
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = self.vit.slices_mut();
        out.extend(self.dino.slices_mut());
        if let Some(g) = self.gsd.as_mut() {
            out.push(g.w.as_slice_mut().unwrap());
            out.push(std::slice::from_mut(&mut g.b));
        }
        out
    }
}
