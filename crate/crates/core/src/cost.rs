//! Symbolic memory model: float-element counts per device for each method.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSpec;
use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "ft")]
    FullFineTune,
    Peft,
    Cola,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FullFineTune => "FT",
            Method::Peft => "PEFT",
            Method::Cola => "ColA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    Inference,
    Learning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Base,
    Offload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// Base hidden representations.
    H,
    /// Adapter-internal representations.
    HTilde,
    Theta,
    W,
    GradH,
    GradHTilde,
    GradTheta,
    GradW,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::H,
        Category::HTilde,
        Category::Theta,
        Category::W,
        Category::GradH,
        Category::GradHTilde,
        Category::GradTheta,
        Category::GradW,
    ];

    pub fn symbol(&self) -> &'static str {
        match self {
            Category::H => "h",
            Category::HTilde => "h~",
            Category::Theta => "theta",
            Category::W => "w",
            Category::GradH => "grad_h",
            Category::GradHTilde => "grad_h~",
            Category::GradTheta => "grad_theta",
            Category::GradW => "grad_w",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub category: Category,
    /// Float elements; zero when the category is not held anywhere.
    pub count: u64,
    pub device: Option<Device>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub merged: bool,
    pub mode: CostMode,
    pub users: usize,
    pub batch: usize,
    /// One entry per [`Category`], in [`Category::ALL`] order.
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn entry(&self, c: Category) -> &CostEntry {
        self.entries.iter().find(|e| e.category == c).expect("every category present")
    }

    pub fn total(&self, device: Device) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.device == Some(device))
            .map(|e| e.count)
            .sum()
    }

    pub fn base_total(&self) -> u64 {
        self.total(Device::Base)
    }

    pub fn offload_total(&self) -> u64 {
        self.total(Device::Offload)
    }

    pub fn label(&self) -> String {
        match self.method {
            Method::FullFineTune => "FT".into(),
            m => format!("{} {}", m.name(), if self.merged { "merged" } else { "unmerged" }),
        }
    }
}

/// Float counts of every category for `users` copies of the per-layer
/// `specs`, a batch of `batch` rows, and the given method.
pub fn cost_report<T: Scalar>(
    model: &BaseModel<T>,
    specs: &[AdapterSpec],
    users: usize,
    method: Method,
    merged: bool,
    mode: CostMode,
    batch: usize,
) -> Result<CostReport> {
    let m = model.tunable_count();
    if method != Method::FullFineTune && specs.len() != m {
        return Err(Error::InvalidSpec(format!(
            "{} adapter specs for {m} fine-tunable layers",
            specs.len()
        )));
    }
    let mut outs = 0u64;
    for (layer, s) in specs.iter().enumerate() {
        let (i, o) = model.tunable_dims(layer)?;
        if (s.in_dim, s.out_dim) != (i, o) {
            return Err(Error::InvalidSpec(format!(
                "adapter at layer {layer} is {}→{}, layer is {i}→{o}",
                s.in_dim, s.out_dim
            )));
        }
    }
    for layer in 0..m {
        outs += model.tunable_dims(layer)?.1 as u64;
    }
    let b = batch as u64;
    let k = users as u64;
    let h = b * outs;
    let theta = model.param_count() as u64;
    // Each row passes through exactly one user's adapter, so Σ_k B_k = B.
    let h_tilde: u64 = specs.iter().map(|s| b * s.representation_width() as u64).sum();
    let w: u64 = specs.iter().map(|s| k * s.param_count() as u64).sum();

    use Category::*;
    use Device::{Base, Offload};
    let learning = mode == CostMode::Learning;
    let held: Vec<(Category, Device)> = match (method, merged, learning) {
        (Method::FullFineTune, _, false) => vec![(Theta, Base)],
        (Method::FullFineTune, _, true) => vec![(H, Base), (Theta, Base), (GradH, Base), (GradTheta, Base)],
        (_, true, false) => vec![(Theta, Base)],
        (_, false, false) => vec![(Theta, Base), (W, Base)],
        (Method::Peft, _, true) => vec![
            (H, Base),
            (HTilde, Base),
            (Theta, Base),
            (W, Base),
            (GradH, Base),
            (GradHTilde, Base),
            (GradW, Base),
        ],
        (Method::Cola, false, true) => vec![
            (H, Base),
            (HTilde, Base),
            (Theta, Base),
            (W, Base),
            (GradH, Base),
            (GradHTilde, Base),
            (GradW, Offload),
        ],
        (Method::Cola, true, true) => vec![
            (H, Base),
            (Theta, Base),
            (GradH, Base),
            (HTilde, Offload),
            (W, Offload),
            (GradHTilde, Offload),
            (GradW, Offload),
        ],
    };
    let size = |c: Category| match c {
        H | GradH => h,
        HTilde | GradHTilde => h_tilde,
        Theta | GradTheta => theta,
        W | GradW => w,
    };
    let entries = Category::ALL
        .iter()
        .map(|&c| match held.iter().find(|(x, _)| *x == c) {
            Some(&(_, d)) => CostEntry {
                category: c,
                count: size(c),
                device: Some(d),
            },
            None => CostEntry {
                category: c,
                count: 0,
                device: None,
            },
        })
        .collect();
    Ok(CostReport {
        method,
        merged,
        mode,
        users,
        batch,
        entries,
    })
}

/// Every method/variant row of the table for both modes.
pub fn cost_table<T: Scalar>(
    model: &BaseModel<T>,
    specs: &[AdapterSpec],
    users: usize,
    batch: usize,
) -> Result<Vec<CostReport>> {
    let rows = [
        (Method::FullFineTune, false),
        (Method::Peft, false),
        (Method::Peft, true),
        (Method::Cola, false),
        (Method::Cola, true),
    ];
    let mut out = Vec::new();
    for (method, merged) in rows {
        for mode in [CostMode::Inference, CostMode::Learning] {
            out.push(cost_report(model, specs, users, method, merged, mode, batch)?);
        }
    }
    Ok(out)
}

fn cell(e: &CostEntry) -> String {
    match e.device {
        None => "-".into(),
        Some(Device::Base) => e.count.to_string(),
        Some(Device::Offload) => format!("{{{}}}", e.count),
    }
}

/// Aligned text table; offloaded counts are shown in braces.
pub struct CostTable<'a>(pub &'a [CostReport]);

impl fmt::Display for CostTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header: Vec<String> = vec!["method".into(), "mode".into()];
        header.extend(Category::ALL.iter().map(|c| c.symbol().to_string()));
        header.push("base".into());
        header.push("offload".into());
        let rows: Vec<Vec<String>> = self
            .0
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.label(),
                    match r.mode {
                        CostMode::Inference => "inference".into(),
                        CostMode::Learning => "learning".into(),
                    },
                ];
                row.extend(r.entries.iter().map(cell));
                row.push(r.base_total().to_string());
                row.push(r.offload_total().to_string());
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0))
            .collect();
        let line = |f: &mut fmt::Formatter<'_>, row: &[String]| -> fmt::Result {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    if j < 2 {
                        format!("{v:<w$}", w = widths[j])
                    } else {
                        format!("{v:>w$}", w = widths[j])
                    }
                })
                .collect();
            writeln!(f, "{}", cells.join("  "))
        };
        line(f, &header)?;
        for r in &rows {
            line(f, r)?;
        }
        Ok(())
    }
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut out = String::from("method,merged,mode,users,batch");
    for c in Category::ALL {
        out.push_str(&format!(",{0},{0}_device", c.symbol()));
    }
    out.push_str(",base,offload\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.method.name(),
            r.merged,
            if r.mode == CostMode::Learning { "learning" } else { "inference" },
            r.users,
            r.batch
        ));
        for e in &r.entries {
            let d = match e.device {
                None => "",
                Some(Device::Base) => "base",
                Some(Device::Offload) => "offload",
            };
            out.push_str(&format!(",{},{d}", e.count));
        }
        out.push_str(&format!(",{},{}\n", r.base_total(), r.offload_total()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterKind;
    use crate::model::Preset;

    fn mlp() -> BaseModel<f32> {
        BaseModel::preset(Preset::mnist_mlp(), 0).unwrap()
    }

    fn specs(model: &BaseModel<f32>, kind: AdapterKind) -> Vec<AdapterSpec> {
        (0..model.tunable_count())
            .map(|m| {
                let (i, o) = model.tunable_dims(m).unwrap();
                AdapterSpec::new(kind, i, o).unwrap()
            })
            .collect()
    }

    #[test]
    fn full_fine_tune_learning_is_all_base() {
        let m = mlp();
        let r = cost_report(&m, &[], 1, Method::FullFineTune, false, CostMode::Learning, 32).unwrap();
        let h = 32 * (128 + 128 + 10);
        let theta = m.param_count() as u64;
        assert_eq!(r.base_total(), 2 * h + 2 * theta);
        assert_eq!(r.offload_total(), 0);
    }

    #[test]
    fn merged_cola_base_cost_ignores_users_and_adapters() {
        let m = mlp();
        let ft = cost_report(&m, &[], 1, Method::FullFineTune, false, CostMode::Learning, 32).unwrap();
        for kind in [AdapterKind::low_rank(), AdapterKind::Linear, AdapterKind::mlp()] {
            for k in [1, 8] {
                let r = cost_report(&m, &specs(&m, kind), k, Method::Cola, true, CostMode::Learning, 32).unwrap();
                assert_eq!(r.base_total(), ft.base_total() - ft.entry(Category::GradTheta).count);
                assert!(r.offload_total() > 0);
            }
        }
    }

    #[test]
    fn unmerged_cola_offloads_exactly_parameter_gradients() {
        let m = mlp();
        let s = specs(&m, AdapterKind::low_rank());
        let peft = cost_report(&m, &s, 4, Method::Peft, false, CostMode::Learning, 32).unwrap();
        let cola = cost_report(&m, &s, 4, Method::Cola, false, CostMode::Learning, 32).unwrap();
        let gw = cola.entry(Category::GradW);
        assert_eq!(gw.device, Some(Device::Offload));
        assert_eq!(gw.count, 4 * s.iter().map(|x| x.param_count() as u64).sum::<u64>());
        assert_eq!(peft.base_total() - cola.base_total(), gw.count);
    }

    #[test]
    fn table_and_csv_shapes() {
        let m = mlp();
        let reports = cost_table(&m, &specs(&m, AdapterKind::Linear), 2, 8).unwrap();
        assert_eq!(reports.len(), 10);
        let csv = cost_csv(&reports);
        assert_eq!(csv.lines().count(), 11);
        let text = CostTable(&reports).to_string();
        assert!(text.contains("ColA merged"));
        assert!(text.contains('{'));
    }

    #[test]
    fn mismatched_specs_are_rejected() {
        let m = mlp();
        let mut s = specs(&m, AdapterKind::Linear);
        s.pop();
        assert!(cost_report(&m, &s, 1, Method::Cola, true, CostMode::Learning, 1).is_err());
    }
}
