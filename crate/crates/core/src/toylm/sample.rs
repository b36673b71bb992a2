use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{forward_position, masked_log_softmax};
use super::params::ToyMoEParams;
use super::ToyLmError;
use crate::rollout::{ChainedRollout, Segment, TokenCategory, TokenRecord};
use crate::vocab::{self, Grammar, Phase};

/// Environment side of a rollout: executes tool calls and returns the tool
/// output tokens.
pub trait ToolEnv {
    fn call_tool(&mut self, tool: u32, arg: u32) -> Result<Vec<u32>, String>;
}

/// Source of the newest published weights. Polled before every token.
pub trait VersionFeed {
    fn current(&mut self) -> (u64, Arc<ToyMoEParams<f32>>);
}

/// Always serves one version.
pub struct StaticFeed {
    pub version: u64,
    pub params: Arc<ToyMoEParams<f32>>,
}

impl VersionFeed for StaticFeed {
    fn current(&mut self) -> (u64, Arc<ToyMoEParams<f32>>) {
        (self.version, self.params.clone())
    }
}

/// Switches versions after a fixed number of polls.
pub struct ScriptedFeed {
    /// `(first poll index, version, params)`, sorted by poll index.
    pub schedule: Vec<(usize, u64, Arc<ToyMoEParams<f32>>)>,
    polls: usize,
}

impl ScriptedFeed {
    pub fn new(schedule: Vec<(usize, u64, Arc<ToyMoEParams<f32>>)>) -> Self {
        ScriptedFeed { schedule, polls: 0 }
    }
}

impl VersionFeed for ScriptedFeed {
    fn current(&mut self) -> (u64, Arc<ToyMoEParams<f32>>) {
        let i = self.polls;
        self.polls += 1;
        let (_, v, p) = self
            .schedule
            .iter()
            .rev()
            .find(|(start, _, _)| *start <= i)
            .unwrap_or(&self.schedule[0]);
        (*v, p.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub grammar: Grammar,
    /// Cap on records (sampled plus tool output) across all segments.
    pub max_tokens: usize,
    pub temperature: f32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            grammar: Grammar::default(),
            max_tokens: 64,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Running,
    Finished,
}

/// Resumable autoregressive sampler for one rollout.
///
/// Each [`RolloutGenerator::step`] emits exactly one policy token (plus any
/// tool output it triggers) using whatever weights the caller passes, which
/// is how in-flight weight updates land between token emissions.
#[derive(Debug, Clone)]
pub struct RolloutGenerator {
    cfg: SampleConfig,
    done: Vec<Segment>,
    summaries: Vec<Vec<u32>>,
    current: Segment,
    context: Vec<u32>,
    rng: ChaCha8Rng,
    emitted: usize,
    finished: bool,
    overlong: bool,
}

impl RolloutGenerator {
    pub fn new(prompt: Vec<u32>, cfg: SampleConfig, seed: u64) -> Self {
        RolloutGenerator {
            cfg,
            done: Vec::new(),
            summaries: Vec::new(),
            context: prompt.clone(),
            current: Segment {
                prompt_tokens: prompt,
                ..Default::default()
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            emitted: 0,
            finished: false,
            overlong: false,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn tokens_emitted(&self) -> usize {
        self.emitted
    }

    /// Oldest policy version used so far, if any token was sampled.
    pub fn first_version(&self) -> Option<u64> {
        self.done
            .iter()
            .chain(std::iter::once(&self.current))
            .flat_map(|s| s.records.iter())
            .map(|r| r.policy_version)
            .next()
    }

    fn push(
        &mut self,
        token: u32,
        category: TokenCategory,
        logprob: f64,
        version: u64,
        trace: Option<super::RouterTrace>,
    ) {
        self.current.records.push(TokenRecord {
            token_id: token,
            category,
            sampling_logprob: logprob,
            policy_version: version,
        });
        self.current.router_traces.push(trace);
        self.context.push(token);
        self.emitted += 1;
    }

    pub fn step(
        &mut self,
        version: u64,
        params: &ToyMoEParams<f32>,
        env: &mut dyn ToolEnv,
    ) -> Result<StepStatus, ToyLmError> {
        if self.finished {
            return Ok(StepStatus::Finished);
        }
        let phase = self.cfg.grammar.phase(&self.context);
        let allowed = self.cfg.grammar.allowed_next(&self.context);
        if allowed.is_empty() {
            self.finished = true;
            return Ok(StepStatus::Finished);
        }
        if self.emitted >= self.cfg.max_tokens {
            self.finished = true;
            self.overlong = true;
            return Ok(StepStatus::Finished);
        }
        let last = *self.context.last().expect("prompt is non-empty");
        let last_key = vocab::last_key_prefix(&self.context).pop().flatten();
        let cache = forward_position(params, last, last_key, None)?;
        let (token, logprob) = if allowed.len() == 1 {
            (allowed[0], 0.0)
        } else {
            let t = self.cfg.temperature;
            let scaled: Vec<f32> = cache.logits.iter().map(|v| v / t).collect();
            let lp = masked_log_softmax(&scaled, Some(&allowed));
            let u: f32 = self.rng.gen();
            let mut acc = 0.0f32;
            let mut pick = *allowed.last().unwrap();
            for &a in &allowed {
                acc += lp[a as usize].exp();
                if u < acc {
                    pick = a;
                    break;
                }
            }
            (pick, lp[pick as usize] as f64)
        };
        let category = match phase {
            Phase::Free if token == vocab::THINK => TokenCategory::Thinking,
            Phase::Free => TokenCategory::ToolCall,
            Phase::Argument if last == vocab::SUMMARIZE => TokenCategory::Summary,
            Phase::Argument => TokenCategory::ToolCall,
            Phase::Final | Phase::Done => TokenCategory::FinalMessage,
            Phase::Summarize => TokenCategory::Summary,
        };
        let new_turn = self
            .current
            .records
            .last()
            .is_none_or(|r| r.category == TokenCategory::ToolOutput);
        if new_turn {
            self.current.turns += 1;
        }
        if phase == Phase::Free && vocab::is_tool(token) {
            self.current.tool_calls += 1;
        }
        self.push(token, category, logprob, version, Some(cache.trace));

        if phase == Phase::Argument {
            if last == vocab::SUMMARIZE {
                self.start_new_segment();
            } else {
                let output = env.call_tool(last, token).map_err(ToyLmError::Env)?;
                for o in output {
                    self.push(o, TokenCategory::ToolOutput, 0.0, version, None);
                }
            }
        }
        if token == vocab::EOS {
            self.finished = true;
        }
        Ok(if self.finished {
            StepStatus::Finished
        } else {
            StepStatus::Running
        })
    }

    fn start_new_segment(&mut self) {
        let summary = self.current.trailing_summary();
        let mut prompt = summary.clone();
        prompt.push(vocab::RESUME);
        let next = Segment {
            prompt_tokens: prompt.clone(),
            ..Default::default()
        };
        self.done.push(std::mem::replace(&mut self.current, next));
        self.summaries.push(summary);
        self.context = prompt;
    }

    pub fn into_rollout(self) -> ChainedRollout {
        let mut segments = self.done;
        segments.push(self.current);
        ChainedRollout {
            segments,
            summaries: self.summaries,
            env_snapshot_ref: None,
            final_reward: None,
            overlong: self.overlong,
        }
    }
}

/// Samples a complete rollout, polling `feed` before every token.
pub fn sample(
    feed: &mut dyn VersionFeed,
    prompt: Vec<u32>,
    env: &mut dyn ToolEnv,
    cfg: SampleConfig,
    seed: u64,
) -> Result<ChainedRollout, ToyLmError> {
    let mut g = RolloutGenerator::new(prompt, cfg, seed);
    loop {
        let (version, params) = feed.current();
        if g.step(version, &params, env)? == StepStatus::Finished {
            return Ok(g.into_rollout());
        }
    }
}

/// Log-probability of every sampled record recomputed with `params`, using
/// the same constrained decoding as the sampler. `None` for tool output and
/// forced tokens.
pub fn recompute_logprobs(
    params: &ToyMoEParams<f32>,
    segment: &Segment,
    grammar: &Grammar,
    temperature: f32,
) -> Result<Vec<Option<f64>>, ToyLmError> {
    let mut context = segment.prompt_tokens.clone();
    let mut out = Vec::with_capacity(segment.records.len());
    for rec in &segment.records {
        if rec.category == TokenCategory::ToolOutput {
            out.push(None);
        } else {
            let allowed = grammar.allowed_next(&context);
            if allowed.len() <= 1 {
                out.push(Some(0.0));
            } else {
                let last = *context.last().unwrap();
                let key = vocab::last_key_prefix(&context).pop().flatten();
                let c = forward_position(params, last, key, None)?;
                let scaled: Vec<f32> = c.logits.iter().map(|v| v / temperature).collect();
                let lp = masked_log_softmax(&scaled, Some(&allowed));
                out.push(Some(lp[rec.token_id as usize] as f64));
            }
        }
        context.push(rec.token_id);
    }
    Ok(out)
}
