use crate::args::*;
use crate::{Failure, THREADS_ENV};
use macrid::corpus::{load_ratings, make_split, InteractionMatrix, SplitSpec, SPLIT_FILE};
use macrid::metrics::{
    confidences, evaluate, export_embeddings, independence, posterior_means, ExportUser,
    RankingResult, RepresentationScope,
};
use macrid::model::{infer_posteriors, load_checkpoint, save_checkpoint, ModelParams, Similarity};
use macrid::trainer::{parameter_budget, random_search, train_with, TrainConfig, TrainReport};
use macrid_service::{corpus_users, Anchor, AppState, ControlRequest, Snapshot};
use serde::Serialize;
use std::fmt::Display;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Resolved invocation, printed before any work so the run can be replayed.
struct Header {
    words: Vec<String>,
}

impl Header {
    fn new(cli: &Cli, sub: &str, threads: usize) -> Self {
        let mut words = vec![format!("{THREADS_ENV}={threads}"), "macrid".into(), sub.into()];
        words.push(format!("--seed {}", cli.seed));
        if cli.quiet {
            words.push("--quiet".into());
        }
        match &cli.json {
            Some(Some(path)) => words.push(format!("--json {}", quote(&path.display().to_string()))),
            Some(None) => words.push("--json".into()),
            None => {}
        }
        Self { words }
    }

    fn arg(&mut self, flag: &str, value: impl Display) -> &mut Self {
        self.words.push(format!("--{flag} {}", quote(&value.to_string())));
        self
    }

    fn path(&mut self, flag: &str, value: &Path) -> &mut Self {
        self.arg(flag, value.display())
    }

    fn print(&self) {
        eprintln!("# {}", self.words.join(" "));
    }
}

fn quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,+".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// Output sink honouring `--json`.
struct Output<'a> {
    json: &'a Option<Option<PathBuf>>,
}

impl Output<'_> {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Result<(), Failure> {
        match self.json {
            None => print!("{}", human()),
            Some(None) => println!("{}", serde_json::to_string(value)?),
            Some(Some(path)) => {
                std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
                print!("{}", human());
            }
        }
        Ok(())
    }
}

pub fn dispatch(cli: &Cli, threads: usize) -> Result<(), Failure> {
    let out = Output { json: &cli.json };
    match &cli.command {
        Command::Prep(a) => prep(cli, threads, a, &out),
        Command::Train(a) => train_cmd(cli, threads, a, &out),
        Command::Search(a) => search(cli, threads, a, &out),
        Command::Eval(a) => eval(cli, threads, a, &out),
        Command::Sweep(a) => sweep(cli, threads, a, &out),
        Command::Control(a) => control(cli, threads, a, &out),
        Command::Export(a) => export(cli, threads, a, &out),
        Command::Serve(a) => serve(cli, threads, a),
    }
}

#[derive(Serialize)]
struct PrepSummary {
    users: usize,
    items: usize,
    interactions: usize,
    train: usize,
    validation: usize,
    test: usize,
}

fn prep(cli: &Cli, threads: usize, a: &PrepArgs, out: &Output) -> Result<(), Failure> {
    Header::new(cli, "prep", threads)
        .path("input", &a.input)
        .arg("threshold", a.threshold)
        .arg("min-items", a.min_items)
        .arg("heldout", a.heldout)
        .arg("foldin", a.foldin)
        .path("out", &a.out)
        .print();
    let m = load_ratings(&a.input, a.threshold, a.min_items)?;
    let split = make_split(&m, a.heldout, a.foldin, cli.seed)?;
    m.save_dir(&a.out)?;
    split.save(&a.out.join(SPLIT_FILE))?;
    let s = PrepSummary {
        users: m.n_users(),
        items: m.n_items(),
        interactions: m.n_interactions(),
        train: split.train_users.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    out.emit(&s, || {
        format!(
            "users {}\nitems {}\ninteractions {}\ntrain/validation/test users {}/{}/{}\n",
            s.users, s.items, s.interactions, s.train, s.validation, s.test
        )
    })
}

fn load_corpus(dir: &Path) -> Result<(InteractionMatrix, SplitSpec), Failure> {
    let m = InteractionMatrix::load_dir(dir)
        .map_err(|e| Failure::Data(format!("corpus {}: {e}", dir.display())))?;
    let split = SplitSpec::load(&dir.join(SPLIT_FILE))
        .map_err(|e| Failure::Data(format!("split {}: {e}", dir.join(SPLIT_FILE).display())))?;
    Ok((m, split))
}

fn load_ckpt(path: &Path) -> Result<(ModelParams, Vec<String>), Failure> {
    load_checkpoint(path).map_err(|e| Failure::Data(format!("checkpoint {}: {e}", path.display())))
}

/// Config file or defaults, overridden by explicit flags.
fn resolve(model: &ModelArgs, seed: u64) -> Result<TrainConfig, Failure> {
    let mut cfg = match &model.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Failure::Data(format!("config {}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    let hp = &mut cfg.hp;
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => {
            $(if let Some(v) = model.$flag { $field = v; })*
        };
    }
    set!(k => hp.k, d => hp.d, beta => hp.beta, sigma0 => hp.sigma0, tau => hp.tau,
         lambda => hp.gumbel_temp, lr => hp.lr, l2 => hp.l2_reg, dropout => hp.dropout,
         layers => hp.hidden_layers, width => hp.hidden_width, neg_samples => hp.neg_samples,
         epochs => cfg.epochs, batch => cfg.batch_size, patience => cfg.patience);
    if let Some(s) = model.similarity {
        cfg.similarity = s.into();
    }
    if let Some(AdaptiveK(t)) = model.adaptive_k {
        cfg.adaptive_k = t;
    }
    cfg.seed = seed;
    cfg.checkpoint_dir = None;
    cfg.validate()?;
    Ok(cfg)
}

fn config_args(h: &mut Header, cfg: &TrainConfig) {
    let hp = &cfg.hp;
    h.arg("k", hp.k)
        .arg("d", hp.d)
        .arg("beta", hp.beta)
        .arg("sigma0", hp.sigma0)
        .arg("tau", hp.tau)
        .arg("lambda", hp.gumbel_temp)
        .arg("lr", hp.lr)
        .arg("l2", hp.l2_reg)
        .arg("dropout", hp.dropout)
        .arg("layers", hp.hidden_layers)
        .arg("width", hp.hidden_width)
        .arg("epochs", cfg.epochs)
        .arg("batch", cfg.batch_size)
        .arg("patience", cfg.patience)
        .arg("neg-samples", hp.neg_samples)
        .arg("similarity", similarity_name(cfg.similarity))
        .arg("adaptive-k", cfg.adaptive_k.map_or("off".into(), |t| t.to_string()));
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::Cosine => "cosine",
        Similarity::Inner => "inner",
    }
}

fn warn_budget(params: &ModelParams) {
    let (n, budget) = parameter_budget(params);
    if n > budget {
        log::warn!("{n} parameters exceed the 2·M·d budget of {budget}");
    }
}

fn print_line<T: Serialize>(value: &T) {
    if let Ok(s) = serde_json::to_string(value) {
        println!("{s}");
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    best_ndcg: Option<f64>,
    n_params: usize,
    budget: usize,
    seconds: f64,
    checkpoint: &'a Path,
}

fn train_summary<'a>(report: &TrainReport, params: &ModelParams, path: &'a Path) -> TrainSummary<'a> {
    let (n_params, budget) = parameter_budget(params);
    TrainSummary {
        best_epoch: report.best_epoch,
        best_ndcg: report.best_ndcg,
        n_params,
        budget,
        seconds: report.seconds,
        checkpoint: path,
    }
}

fn human_train(s: &TrainSummary) -> String {
    let ndcg = s.best_ndcg.map_or("n/a".into(), |v| format!("{v:.5}"));
    format!(
        "best epoch {} validation NDCG@100 {ndcg}\nparameters {} (2Md {})\ncheckpoint {}\n",
        s.best_epoch,
        s.n_params,
        s.budget,
        s.checkpoint.display()
    )
}

fn train_cmd(cli: &Cli, threads: usize, a: &TrainArgs, out: &Output) -> Result<(), Failure> {
    let cfg = resolve(&a.model, cli.seed)?;
    let mut h = Header::new(cli, "train", threads);
    h.path("corpus", &a.corpus);
    config_args(&mut h, &cfg);
    h.path("out", &a.out).print();
    let (m, split) = load_corpus(&a.corpus)?;
    let (params, report) = train_with(&m, &split, &cfg, |r| {
        if cli.json.is_none() {
            print_line(r);
        }
        log::info!("epoch {} loss {:.4} val {:?}", r.epoch, r.loss, r.val_ndcg);
    })?;
    warn_budget(&params);
    save_checkpoint(&a.out, &params, m.item_vocab())?;
    let s = train_summary(&report, &params, &a.out);
    out.emit(&report, || human_train(&s))
}

fn search(cli: &Cli, threads: usize, a: &SearchArgs, out: &Output) -> Result<(), Failure> {
    let base = resolve(&a.model, cli.seed)?;
    let mut h = Header::new(cli, "search", threads);
    h.path("corpus", &a.corpus).arg("trials", a.trials);
    config_args(&mut h, &base);
    h.path("out", &a.out);
    if let Some(p) = &a.save_config {
        h.path("save-config", p);
    }
    h.print();
    let (m, split) = load_corpus(&a.corpus)?;
    let result = random_search(&m, &split, &base, a.trials, cli.seed, |t| {
        if cli.json.is_none() {
            print_line(t);
        }
        log::info!("trial {} score {:?}", t.trial, t.score);
    })?;
    let (params, report) = train_with(&m, &split, &result.best, |_| {})?;
    warn_budget(&params);
    save_checkpoint(&a.out, &params, m.item_vocab())?;
    if let Some(p) = &a.save_config {
        std::fs::write(p, serde_json::to_vec_pretty(&result.best)?)?;
    }
    let s = train_summary(&report, &params, &a.out);
    out.emit(&result, || {
        let mut text = human_train(&s);
        let _ = writeln!(text, "best config {}", serde_json::to_string(&result.best.hp).unwrap_or_default());
        text
    })
}

fn check_vocab(ckpt: &[String], corpus: &InteractionMatrix) -> Result<(), Failure> {
    if ckpt != corpus.item_vocab() {
        return Err(Failure::Data(
            "checkpoint and corpus item vocabularies differ".into(),
        ));
    }
    Ok(())
}

fn human_ranking(r: &RankingResult) -> String {
    format!(
        "users {} (skipped {})\nNDCG@100  {:.5} ± {:.5}\nRecall@20 {:.5} ± {:.5}\nRecall@50 {:.5} ± {:.5}\n",
        r.per_user.len(),
        r.skipped,
        r.ndcg100.mean,
        r.ndcg100.std_err,
        r.recall20.mean,
        r.recall20.std_err,
        r.recall50.mean,
        r.recall50.std_err
    )
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Validation => "validation",
        SplitArg::Test => "test",
    }
}

fn eval(cli: &Cli, threads: usize, a: &EvalArgs, out: &Output) -> Result<(), Failure> {
    Header::new(cli, "eval", threads)
        .path("ckpt", &a.ckpt)
        .path("corpus", &a.corpus)
        .arg("split", split_name(a.split))
        .print();
    let (params, items) = load_ckpt(&a.ckpt)?;
    let (m, split) = load_corpus(&a.corpus)?;
    check_vocab(&items, &m)?;
    let result = evaluate(&params, &split, a.split.into())?;
    out.emit(&result, || human_ranking(&result))
}

/// Parses `name=v1,v2,…` entries into value lists.
fn parse_grid(grid: &[String]) -> Result<Vec<(String, Vec<String>)>, Failure> {
    grid.iter()
        .map(|g| {
            let (name, values) = g
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("grid entry {g:?} is not name=v1,v2")))?;
            let values: Vec<String> = values.split(',').map(str::to_string).collect();
            if values.iter().any(String::is_empty) {
                return Err(Failure::Usage(format!("empty value in {g:?}")));
            }
            Ok((name.to_string(), values))
        })
        .collect()
}

fn set_flag(model: &mut ModelArgs, name: &str, value: &str) -> Result<(), Failure> {
    fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<Option<T>, Failure> {
        v.parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("bad value {v:?} for {name}")))
    }
    match name {
        "k" => model.k = parse(name, value)?,
        "d" => model.d = parse(name, value)?,
        "beta" => model.beta = parse(name, value)?,
        "sigma0" => model.sigma0 = parse(name, value)?,
        "tau" => model.tau = parse(name, value)?,
        "lambda" => model.lambda = parse(name, value)?,
        "lr" => model.lr = parse(name, value)?,
        "l2" => model.l2 = parse(name, value)?,
        "dropout" => model.dropout = parse(name, value)?,
        "layers" => model.layers = parse(name, value)?,
        "width" => model.width = parse(name, value)?,
        "epochs" => model.epochs = parse(name, value)?,
        "batch" => model.batch = parse(name, value)?,
        _ => return Err(Failure::Usage(format!("cannot sweep {name:?}"))),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    config: Vec<(String, String)>,
    ndcg100: f64,
    independence: f64,
}

fn sweep(cli: &Cli, threads: usize, a: &SweepArgs, out: &Output) -> Result<(), Failure> {
    let grid = parse_grid(&a.grid)?;
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (name, values) in &grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((name.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let configs = combos
        .into_iter()
        .map(|combo| {
            let mut model = a.model.clone();
            for (name, value) in &combo {
                set_flag(&mut model, name, value)?;
            }
            Ok((combo, resolve(&model, cli.seed)?))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let base = resolve(&a.model, cli.seed)?;
    let mut h = Header::new(cli, "sweep", threads);
    h.path("corpus", &a.corpus);
    h.words.push(format!("--grid {}", a.grid.iter().map(|g| quote(g)).collect::<Vec<_>>().join(" ")));
    config_args(&mut h, &base);
    h.arg("split", split_name(a.split)).arg("scope", a.scope).path("out", &a.out).print();
    let scope = match a.scope.0 {
        None => RepresentationScope::Concatenated,
        Some(k) => RepresentationScope::Concept(k),
    };

    let (m, split) = load_corpus(&a.corpus)?;
    let part = split.part(a.split.into());
    let rows: Vec<&[u32]> = part.iter().map(|u| u.foldin.as_slice()).collect();
    let mut csv = grid.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",");
    csv.push_str(",ndcg100,independence\n");
    let mut results = Vec::new();
    for (combo, cfg) in configs {
        let (params, _) = train_with(&m, &split, &cfg, |_| {})?;
        let ndcg = evaluate(&params, &split, a.split.into())?.ndcg100.mean;
        let ind = independence(&posterior_means(&params, &rows, scope)?)?.value;
        log::info!("{combo:?} NDCG@100 {ndcg:.5} independence {ind:.5}");
        for (_, v) in &combo {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{ndcg},{ind}");
        results.push(SweepRow { config: combo, ndcg100: ndcg, independence: ind });
    }
    std::fs::write(&a.out, &csv)?;
    out.emit(&results, || csv.clone())
}

fn corpus_snapshot(params: ModelParams, items: Vec<String>, corpus: Option<&Path>) -> Result<Snapshot, Failure> {
    let users = match corpus {
        Some(dir) => {
            let m = InteractionMatrix::load_dir(dir)
                .map_err(|e| Failure::Data(format!("corpus {}: {e}", dir.display())))?;
            let split_path = dir.join(SPLIT_FILE);
            let split = if split_path.exists() { Some(SplitSpec::load(&split_path)?) } else { None };
            corpus_users(&m, split.as_ref(), &items)?
        }
        None => Vec::new(),
    };
    Ok(Snapshot::new(params, items, users)?)
}

fn control(cli: &Cli, threads: usize, a: &ControlArgs, out: &Output) -> Result<(), Failure> {
    let mut h = Header::new(cli, "control", threads);
    h.path("ckpt", &a.ckpt);
    let anchor = match (&a.item, &a.user, a.k) {
        (Some(item), _, _) => {
            h.arg("item", item);
            Anchor::Item { item: item.clone() }
        }
        (None, Some(user), Some(k)) => {
            h.arg("user", user).arg("k", k);
            Anchor::User { user: user.clone(), k }
        }
        _ => return Err(Failure::Usage("need --item, or --user with --k".into())),
    };
    if let Some(c) = &a.corpus {
        h.path("corpus", c);
    }
    h.arg("dim", a.dim).arg("b", a.b).arg("gamma", a.gamma).arg("beam", a.beam);
    if let Some(t) = a.tau {
        h.arg("tau", t);
    }
    h.print();
    let (params, items) = load_ckpt(&a.ckpt)?;
    let snap = corpus_snapshot(params, items, a.corpus.as_deref())?;
    let req = ControlRequest {
        anchor,
        dim: a.dim,
        b: Some(a.b),
        gamma: Some(a.gamma),
        beam: Some(a.beam),
        tau: a.tau,
    };
    let resp = snap.control(&req).map_err(|e| match e.status.as_u16() {
        400 => Failure::Usage(e.body.message),
        _ => Failure::Data(e.body.message),
    })?;
    out.emit(&resp, || {
        let t = &resp.trajectory;
        let mut text = format!(
            "concept {} range ({:.5}, {:.5}) objective {:.5}\n",
            t.concept, t.range.0, t.range.1, t.objective
        );
        for (s, (id, v)) in resp.item_ids.iter().zip(&t.dim_values).enumerate() {
            let _ = writeln!(
                text,
                "{s}\t{id}\t{v:.5}\t[{:.5}, {:.5})",
                t.boundaries[s],
                t.boundaries[s + 1]
            );
        }
        text
    })
}

#[derive(Serialize)]
struct ExportSummary<'a> {
    items: usize,
    users: usize,
    path: &'a Path,
}

fn export(cli: &Cli, threads: usize, a: &ExportArgs, out: &Output) -> Result<(), Failure> {
    let mut h = Header::new(cli, "export", threads);
    h.path("ckpt", &a.ckpt);
    if let Some(c) = &a.corpus {
        h.path("corpus", c);
    }
    h.path("out", &a.out).print();
    let (params, items) = load_ckpt(&a.ckpt)?;
    let users = match &a.corpus {
        Some(dir) => {
            let m = InteractionMatrix::load_dir(dir)
                .map_err(|e| Failure::Data(format!("corpus {}: {e}", dir.display())))?;
            let split_path = dir.join(SPLIT_FILE);
            let split = if split_path.exists() { Some(SplitSpec::load(&split_path)?) } else { None };
            corpus_users(&m, split.as_ref(), &items)?
        }
        None => Vec::new(),
    };
    let rows: Vec<&[u32]> = users.iter().map(|(_, r)| r.as_slice()).collect();
    let (assignment, posteriors) = infer_posteriors(&params, &rows)?;
    let export_users: Vec<ExportUser> = users
        .iter()
        .zip(&posteriors)
        .map(|((id, row), posterior)| ExportUser {
            id,
            posterior,
            confidence: confidences(&assignment, row),
        })
        .collect();
    export_embeddings(&a.out, &params, &assignment, &items, &export_users)?;
    let s = ExportSummary { items: items.len(), users: users.len(), path: &a.out };
    out.emit(&s, || format!("{} items, {} users -> {}\n", s.items, s.users, s.path.display()))
}

fn serve(cli: &Cli, threads: usize, a: &ServeArgs) -> Result<(), Failure> {
    let mut h = Header::new(cli, "serve", threads);
    h.path("ckpt", &a.ckpt);
    if let Some(c) = &a.corpus {
        h.path("corpus", c);
    }
    h.arg("host", &a.host).arg("port", a.port).print();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads)
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        let state = AppState::default();
        let loader = state.clone();
        let (ckpt, corpus) = (a.ckpt.clone(), a.corpus.clone());
        let load = tokio::task::spawn_blocking(move || -> Result<(), Failure> {
            let (params, items) = load_ckpt(&ckpt)?;
            loader.install(corpus_snapshot(params, items, corpus.as_deref())?);
            log::info!("model loaded");
            Ok(())
        });
        let server = tokio::spawn(macrid_service::serve(listener, state));
        load.await.map_err(|e| Failure::Data(e.to_string()))??;
        server
            .await
            .map_err(|e| Failure::Data(e.to_string()))?
            .map_err(Failure::from)
    })
}
