use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use kkt_core::harness::synth::kg_tsv;
use kkt_core::harness::{
    apply_seed_env, data_hash, derive_nli, gen_synthetic, load_dataset, sweep_checkpoint, sweep_train, train, world_kg,
    Dataset, KgInput, Model, RunConfig, Split, SweepGrid, SynthMode, TrainInputs,
};
use kkt_core::keyturns::{load_nli, nli_to_jsonl, score_all, select_key_turns};
use kkt_core::knowledge::{PosTagger, SurfaceTable};
use kkt_core::model::{Ablation, DialogueExample};

/// Knowledge and key-turn refined reader for multi-choice dialogue
/// comprehension. Every command prints JSON on stdout.
#[derive(Parser)]
#[command(name = "kkt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reader and write per-epoch checkpoints plus best.kktc.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Top-p knowledge items for some text.
    Retrieve(RetrieveArgs),
    /// Entailment relevance of every turn against every QA pair of one example.
    ScoreTurns(ScoreTurnsArgs),
    /// Generate a synthetic dataset with planted signals and its companion files.
    GenData(GenDataArgs),
    /// Accuracy over a grid of k, p and ablations.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Resources {
    /// Relation phrasing table (relation<TAB>phrase); built-in phrases otherwise.
    #[arg(long)]
    surface: Option<PathBuf>,
    /// Part-of-speech lexicon (word<TAB>tag); the built-in tagger otherwise.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl Resources {
    fn surface(&self) -> Result<SurfaceTable> {
        match &self.surface {
            Some(p) => SurfaceTable::load(p).with_context(|| format!("loading surface table {}", p.display())),
            None => Ok(SurfaceTable::builtin()),
        }
    }

    fn tagger(&self) -> Result<PosTagger> {
        match &self.lexicon {
            Some(p) => PosTagger::from_lexicon_file(p).with_context(|| format!("loading lexicon {}", p.display())),
            None => Ok(PosTagger::builtin()),
        }
    }

    fn kg(&self, path: Option<&Path>) -> Result<Option<KgInput>> {
        path.map(|p| KgInput::load(p, self.surface()?).with_context(|| format!("loading graph {}", p.display())))
            .transpose()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// RunConfig JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Dev set used to pick the best epoch.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Entailment corpus (JSONL); derived from the training data otherwise.
    #[arg(long)]
    nli: Option<PathBuf>,
    /// Start from lr 1e-5, batch 1, 3 epochs, warmup 50 before applying --config.
    #[arg(long)]
    paper_defaults: bool,
    #[command(flatten)]
    res: Resources,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Defaults to the checkpoint's own ablation.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    res: Resources,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    kg: PathBuf,
    /// Query text; repeat for several turns.
    #[arg(long, required = true)]
    text: Vec<String>,
    #[arg(long, default_value_t = 30)]
    top_p: usize,
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[command(flatten)]
    res: Resources,
}

#[derive(Args)]
struct ScoreTurnsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `{dialogue id}#{question index}`, or a dialogue id for its first question.
    #[arg(long)]
    example_id: String,
    /// Defaults to the checkpoint's k.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, env = "KKT_SEED")]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    mode: SynthMode,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON grid: {"k": [...], "p": [...], "ablation": [...]}.
    #[arg(long)]
    grid: PathBuf,
    /// Evaluation data with --ckpt, training data otherwise.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Results file.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate this checkpoint at every cell instead of training one per cell.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluation set when training per cell.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nli: Option<PathBuf>,
    /// Run grid cells concurrently.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    res: Resources,
}

fn examples(path: &Path) -> Result<(Dataset, Vec<DialogueExample>)> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let ex = ds.examples()?;
    Ok((ds, ex))
}

fn run_config(path: Option<&Path>, paper: bool) -> Result<RunConfig> {
    let base = if paper {
        RunConfig::paper_defaults()
    } else {
        RunConfig::default()
    };
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let mut merged = serde_json::to_value(&base)?;
            if let (Some(m), Some(o)) = (merged.as_object_mut(), v.as_object_mut()) {
                m.extend(std::mem::take(o));
            } else {
                bail!("{} must hold a JSON object", p.display());
            }
            serde_json::from_value(merged).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => base,
    };
    apply_seed_env(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<Value> {
    let cfg = run_config(a.config.as_deref(), a.paper_defaults)?;
    let (_, train_ex) = examples(&a.data)?;
    let dev = a.dev.as_deref().map(examples).transpose()?;
    let kg = a.res.kg(a.kg.as_deref())?;
    let nli = a.nli.as_deref().map(load_nli).transpose()?;
    let tagger = a.res.tagger()?;
    let inputs = TrainInputs {
        train: &train_ex,
        dev: dev.as_ref().map(|(_, e)| e.as_slice()),
        kg: kg.as_ref(),
        nli: nli.as_deref(),
        tagger: &tagger,
        stop_at_train_accuracy: None,
    };
    let outcome = train(&cfg, &inputs, Some(&a.out))?;
    let mut v = serde_json::to_value(&outcome.log)?;
    v["checkpoint"] = json!(a.out.join("best.kktc"));
    v["checkpoint_sha256"] = json!(outcome.model.hash()?);
    Ok(v)
}

fn cmd_eval(a: EvalArgs) -> Result<Value> {
    let loaded = Model::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let mut model = match a.ablation {
        Some(abl) => loaded.with_ablation(abl)?,
        None => loaded,
    };
    if let Some(k) = a.k {
        model.config.k = k;
    }
    if let Some(p) = a.p {
        model.config.p = p;
    }
    model.config.validate()?;
    let (ds, ex) = examples(&a.data)?;
    let kg = a.res.kg(a.kg.as_deref())?;
    let tagger = a.res.tagger()?;
    let store = kg.as_ref().map(|k| k.store(model.config.threshold, &model.vocab));
    let hash = format!(
        "{}:{}:{}",
        ds.hash(),
        kg.as_ref().map(KgInput::hash).unwrap_or_default(),
        model.hash()?
    );
    let fp = model.config.fingerprint(&hash);
    let report = kkt_core::harness::evaluate(&model, &ex, store.as_ref(), &tagger, fp)?;
    let v = serde_json::to_value(&report)?;
    if let Some(out) = &a.out {
        write_json(out, &v)?;
    }
    Ok(v)
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<Value> {
    let surface = a.res.surface()?;
    let tagger = a.res.tagger()?;
    let store = kkt_core::knowledge::load_kg(&a.kg, a.threshold, None, &surface)
        .with_context(|| format!("loading graph {}", a.kg.display()))?;
    let hits: Vec<Value> = store
        .retrieve(&a.text, a.top_p, &tagger)
        .into_iter()
        .map(|r| {
            let t = store.triple(r.id);
            json!({
                "id": r.id.0,
                "relation": t.relation,
                "head": t.head,
                "tail": t.tail,
                "weight": r.weight,
                "matched": r.matched,
                "fact": r.fact,
            })
        })
        .collect();
    Ok(json!({
        "query": a.text,
        "content_words": tagger.content_words(&a.text.join(" ")),
        "top_p": a.top_p,
        "results": hits,
    }))
}

fn find_example<'a>(ex: &'a [DialogueExample], id: &str) -> Result<&'a DialogueExample> {
    ex.iter()
        .find(|e| e.id == id)
        .or_else(|| ex.iter().find(|e| e.id == format!("{id}#0")))
        .with_context(|| format!("no example with id {id:?}"))
}

fn cmd_score_turns(a: ScoreTurnsArgs) -> Result<Value> {
    let model = Model::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let head = model
        .nli
        .as_ref()
        .context("checkpoint has no entailment head; train an ablation that uses key turns with k >= 1")?;
    let (_, ex) = examples(&a.data)?;
    let e = find_example(&ex, &a.example_id)?;
    let k = a.k.unwrap_or(model.config.k);
    let qa: Vec<String> = (0..e.options.len()).map(|j| e.qa_text(j)).collect();
    let scores = score_all(&model.store, head, &model.vocab, &e.turns, &qa)?;
    let options = scores
        .iter()
        .enumerate()
        .map(|(j, s)| {
            Ok(json!({
                "option": j,
                "qa": qa[j],
                "scores": s.iter().map(|r| r.score).collect::<Vec<_>>(),
                "key_turns": select_key_turns(s, k)?.turns,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "id": e.id,
        "k": k,
        "turns": e.turns,
        "options": options,
    }))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<Value> {
    let data = gen_synthetic(a.seed, a.n, a.mode, a.split)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ex = data.dataset.examples()?;
    let nli = derive_nli(&ex, &PosTagger::builtin(), a.seed);
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = a.out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    };
    let dataset = write("dataset.json", data.dataset.to_json())?;
    let kg = write("kg.tsv", kg_tsv(&world_kg()))?;
    let surface = write("surface.tsv", SurfaceTable::builtin().to_tsv())?;
    let nli_path = write("nli.jsonl", nli_to_jsonl(&nli))?;
    let planted = write("planted.json", serde_json::to_string_pretty(&data.planted)? + "\n")?;
    Ok(json!({
        "seed": a.seed,
        "mode": a.mode,
        "split": a.split.as_str(),
        "dialogues": data.dataset.dialogues.len(),
        "questions": data.dataset.num_questions(),
        "sha256": data.dataset.hash(),
        "files": {
            "dataset": dataset,
            "kg": kg,
            "surface": surface,
            "nli": nli_path,
            "planted": planted,
        },
    }))
}

fn cmd_sweep(a: SweepArgs) -> Result<Value> {
    let text = fs::read_to_string(&a.grid).with_context(|| format!("reading {}", a.grid.display()))?;
    let grid: SweepGrid = serde_json::from_str(&text).with_context(|| format!("parsing grid {}", a.grid.display()))?;
    let kg = a.res.kg(a.kg.as_deref())?;
    let tagger = a.res.tagger()?;
    let (ds, ex) = examples(&a.data)?;
    let rows = match &a.ckpt {
        Some(ckpt) => {
            if a.config.is_some() || a.dev.is_some() || a.nli.is_some() {
                bail!("--config, --dev and --nli apply only when training per cell");
            }
            let model = Model::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let hash = format!("{}:{}", ds.hash(), kg.as_ref().map(KgInput::hash).unwrap_or_default());
            sweep_checkpoint(&model, &grid, &ex, kg.as_ref(), &tagger, &hash, a.parallel)?
        }
        None => {
            let dev_path = a.dev.as_deref().context("--dev is required when training per cell")?;
            let (_, dev) = examples(dev_path)?;
            let cfg = run_config(a.config.as_deref(), false)?;
            let nli = a.nli.as_deref().map(load_nli).transpose()?;
            let inputs = TrainInputs {
                train: &ex,
                dev: Some(&dev),
                kg: kg.as_ref(),
                nli: nli.as_deref(),
                tagger: &tagger,
                stop_at_train_accuracy: None,
            };
            log::info!("sweep data hash {}", data_hash(&inputs));
            sweep_train(&cfg, &grid, &inputs, &dev, a.parallel)?
        }
    };
    let v = json!({ "rows": rows });
    write_json(&a.out, &v)?;
    Ok(v)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let v = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::ScoreTurns(a) => cmd_score_turns(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Sweep(a) => cmd_sweep(a),
    }?;
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}
