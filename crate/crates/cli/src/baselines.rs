//! Published clustering results (percent) used by `gcma eval --paper`.

pub const METHODS: [&str; 11] =
    ["DNGR", "TADW", "ARGE", "ARVGE", "AGC", "DAEGC", "EGAE", "SDCN", "DFCN", "GCMA-A", "GCMA"];

/// Not published.
const NA: f64 = f64::NAN;

pub struct DatasetBaselines {
    pub dataset: &'static str,
    /// ACC, NMI and ARI rows in [`METHODS`] order; NaN where no number exists.
    pub rows: [(&'static str, [f64; 11]); 3],
}

pub const TABLE: [DatasetBaselines; 4] = [
    DatasetBaselines {
        dataset: "cora",
        rows: [
            ("ACC", [41.91, 56.03, 64.00, 63.80, 68.92, 70.40, 72.42, 71.00, 74.02, 73.82, 74.74]),
            ("NMI", [31.84, 44.11, 44.90, 45.00, 53.68, 52.80, 53.96, 50.25, 53.90, 58.00, 59.16]),
            ("ARI", [14.22, 33.20, 35.20, 37.40, NA, 49.60, 47.22, 47.02, 48.10, 53.04, 55.41]),
        ],
    },
    DatasetBaselines {
        dataset: "citeseer",
        rows: [
            ("ACC", [32.59, 45.48, 57.30, 54.40, 67.00, 67.20, 67.42, 66.00, 69.50, 67.20, 67.30]),
            ("NMI", [18.02, 29.14, 35.00, 26.10, 41.13, 39.70, 41.18, 38.70, 43.90, 45.00, 44.30]),
            ("ARI", [4.29, 22.81, 34.10, 24.50, NA, 41.00, 43.18, 40.20, 45.50, 45.00, 46.07]),
        ],
    },
    DatasetBaselines {
        dataset: "dblp",
        rows: [
            ("ACC", [30.00, 49.00, 59.30, 59.50, 63.00, 63.10, 65.90, 68.10, 74.00, 67.00, 68.43]),
            ("NMI", [15.73, 20.90, 26.00, 26.28, 32.10, 33.55, 38.72, 38.70, 43.21, 40.00, 44.10]),
            ("ARI", [9.03, 14.00, 17.20, 18.00, 20.00, 23.80, 39.00, 39.20, 46.00, 45.28, 47.55]),
        ],
    },
    DatasetBaselines {
        dataset: "ogbn-arxiv",
        rows: [
            ("ACC", [NA, NA, NA, NA, NA, 29.40, 30.11, 30.10, 31.00, 28.94, 28.95]),
            ("NMI", [NA, NA, NA, NA, NA, 40.00, 43.20, 44.09, 44.60, 44.80, 45.00]),
            ("ARI", [NA, NA, NA, NA, NA, 19.30, 20.00, 20.19, 20.01, 20.10, 22.03]),
        ],
    },
];

pub fn lookup(dataset: &str) -> Option<&'static DatasetBaselines> {
    let key = dataset.to_ascii_lowercase();
    TABLE.iter().find(|d| d.dataset == key)
}

/// Side-by-side table of the published rows and this run, in percent.
pub fn comparison_table(base: &DatasetBaselines, run: &gcma_core::metrics::EvalResult) -> String {
    let mut out = format!("{:<6}", base.dataset);
    for m in METHODS {
        out.push_str(&format!("{m:>8}"));
    }
    out.push_str(&format!("{:>8}\n", "this run"));
    let ours = [run.acc, run.nmi, run.ari];
    for ((metric, values), mine) in base.rows.iter().zip(ours) {
        out.push_str(&format!("{metric:<6}"));
        for v in values {
            if v.is_nan() {
                out.push_str(&format!("{:>8}", "-"));
            } else {
                out.push_str(&format!("{v:>8.2}"));
            }
        }
        out.push_str(&format!("{:>8.2}\n", mine * 100.0));
    }
    out
}
