#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use gmmunit::data::{synth_digits, toy_domain_images, toy_domain_name, Dataset};
use gmmunit::gmm::DomainLabel;
use gmmunit::nn::NetConfig;

/// Outcome of one sub-check of a criterion.
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Default)]
pub struct Checks(pub Vec<Check>);

impl Checks {
    pub fn add(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    pub fn all_ok(&self) -> bool {
        self.0.iter().all(|c| c.ok)
    }

    /// Writes one summary line straight to stderr, bypassing the test
    /// harness capture, then fails the test if any check failed.
    pub fn finish(self, criterion: u32, title: &str) {
        let ok = self.all_ok();
        let failed: Vec<String> = self
            .0
            .iter()
            .filter(|c| !c.ok)
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect();
        let body = if ok {
            self.0.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ")
        } else {
            format!("failed: {}", failed.join("; "))
        };
        let tag = if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "[{tag}] criterion {criterion} ({title}): {body}");
        assert!(ok, "criterion {criterion} failed: {}", failed.join("; "));
    }
}

/// Three toy domains of `per_domain` digits each, `size` x `size`.
pub fn toy_dataset(per_domain: usize, size: usize, seed: u64) -> Dataset {
    let gray: Vec<_> = synth_digits(per_domain * 3, size, seed).into_iter().map(|(g, _)| g).collect();
    let domains = toy_domain_images(&gray, 3, seed).unwrap();
    let mut ds = Dataset::new(size, size);
    for (k, images) in domains.iter().enumerate() {
        for (i, img) in images.iter().enumerate() {
            let label = DomainLabel::one_hot(k, 3, toy_domain_name(k));
            ds.push(img, label, PathBuf::from(format!("{k}/{i}")));
        }
    }
    ds
}

/// Small networks for fast contract tests: three stages everywhere.
pub fn tiny_net(size: usize, base: usize, code_dim: usize, n_domains: usize) -> NetConfig {
    let mut cfg = NetConfig::standard(size, size, code_dim, n_domains).with_base_channels(base);
    cfg.mlp_dim = 16;
    cfg.attr_downsamples = 3;
    cfg.disc_downsamples = 3;
    cfg.content_res_blocks = 1;
    cfg.gen_res_blocks = 1;
    cfg
}

pub fn domain_names(n: usize) -> Vec<String> {
    (0..n).map(toy_domain_name).collect()
}
