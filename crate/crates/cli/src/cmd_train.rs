use spxc::training::{split_validation, LoopOptions, TrainState};

use crate::config::{load_mnist, CliError, CliResult, RunConfig};

pub fn run(cfg: &RunConfig, resume: bool, verbose: bool) -> CliResult<()> {
    let data = load_mnist(cfg)?;
    let (mut train, val) = split_validation(data.train, cfg.train.validation_count)?;
    if let Some(n) = cfg.train_limit {
        train.truncate(n);
    }
    if let Some(k) = cfg.train_repeat.filter(|&k| k > 1) {
        train = train.iter().cloned().cycle().take(train.len() * k).collect();
    }
    let out = cfg.out_dir();
    let last = out.join("last.spxc");
    let mut state = if resume && last.exists() {
        let st = TrainState::load(&last)?;
        if st.model.cfg != cfg.network {
            return Err(CliError::Usage(format!(
                "{} was trained with a different network config",
                last.display()
            )));
        }
        eprintln!("resuming at epoch {} step {}", st.progress.epoch, st.progress.step);
        let mut st = st;
        st.train.max_epochs = cfg.train.max_epochs;
        st.train.max_steps = cfg.train.max_steps;
        st
    } else {
        TrainState::new(&cfg.network, &cfg.train)?
    };
    state.provenance = Some(cfg.provenance());
    let opts = LoopOptions {
        out_dir: Some(out.clone()),
        checkpoint_every: Some(100),
        max_steps: None,
        verbose,
    };
    state.train_loop(&train, &val, &opts)?;
    let best = state.progress.stopper.best;
    let summary = serde_json::json!({
        "run": cfg.provenance(),
        "epochs": state.progress.epoch,
        "steps": state.progress.step,
        "finished": state.progress.finished,
        "best_val_bpd": best,
        "best_epoch": state.progress.stopper.best_epoch,
        "history": state.progress.history,
    });
    crate::write_json(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} epochs ({} steps); best validation bpd {}",
        state.progress.epoch,
        state.progress.step,
        best.map_or("n/a".into(), |b| format!("{b:.4}"))
    );
    Ok(())
}
