//! Round-based debate engines for the Memory and Collective Refinement
//! paradigms.
//!
//! Memory: rounds `1..=M`, agents speak sequentially in configured order and
//! each sees everything said before its turn. Collective Refinement: a
//! draft round 0 with no visibility, then refinement rounds `1..=M` in which
//! every agent sees the previous round's answers of the other `N - 1`
//! agents. Consensus is checked over each agent's latest decision after
//! every round; without consensus the last agent's latest decision wins.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{render_answer, AgentError, AgentResponse, AgentSpec, Invoke, InvokeContext};
use crate::tabular::{build_debate_prompt, PromptTemplate, TabularError, TabularInstance};

#[derive(Debug, Error)]
pub enum DebateError {
    #[error("invalid debate config: {0}")]
    Config(String),
    #[error("agent `{agent_id}` failed in round {round}: {source}")]
    Agent {
        agent_id: String,
        round: u32,
        #[source]
        source: AgentError,
    },
    #[error("prompt construction failed: {0}")]
    Prompt(#[from] TabularError),
    #[error("incomplete transcript: {0}")]
    Incomplete(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    #[serde(rename = "memory")]
    Memory,
    #[serde(rename = "collref")]
    CollRef,
}

impl Paradigm {
    pub fn slug(self) -> &'static str {
        match self {
            Paradigm::Memory => "memory",
            Paradigm::CollRef => "collref",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Memory => "Memory",
            Paradigm::CollRef => "CollRef",
        })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateConfig {
    pub paradigm: Paradigm,
    pub max_rounds: u32,
    pub threshold: f64,
    pub agent_order: Vec<String>,
    /// Memory only: whether an agent sees its own earlier messages.
    #[serde(default = "default_true")]
    pub include_own_history: bool,
}

impl DebateConfig {
    pub fn new(
        paradigm: Paradigm,
        max_rounds: u32,
        threshold: f64,
        agent_order: Vec<String>,
    ) -> Self {
        Self {
            paradigm,
            max_rounds,
            threshold,
            agent_order,
            include_own_history: true,
        }
    }

    pub fn validate(&self) -> Result<(), DebateError> {
        if self.agent_order.len() < 2 {
            return Err(DebateError::Config(format!(
                "a debate needs at least 2 agents, got {}",
                self.agent_order.len()
            )));
        }
        for (i, id) in self.agent_order.iter().enumerate() {
            if self.agent_order[..i].contains(id) {
                return Err(DebateError::Config(format!("agent `{id}` listed twice")));
            }
        }
        if self.max_rounds < 1 {
            return Err(DebateError::Config("max_rounds must be at least 1".into()));
        }
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(DebateError::Config(format!(
                "threshold must lie in (0.5, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    fn first_round(&self) -> u32 {
        match self.paradigm {
            Paradigm::Memory => 1,
            Paradigm::CollRef => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateMessage {
    pub agent_id: String,
    pub display_index: usize,
    pub round: u32,
    pub response: AgentResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionVia {
    Consensus,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub decision: bool,
    pub via: DecisionVia,
    /// Memory: discussion rounds run. CollRef: refinement rounds run after
    /// the drafts.
    pub rounds_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub instance_id: u64,
    pub config: DebateConfig,
    pub messages: Vec<DebateMessage>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusResult {
    pub reached: bool,
    pub majority: Option<bool>,
    pub proportion: f64,
}

/// Consensus holds when a unique modal decision is shared by at least a
/// fraction `threshold` of the agents. Ties never reach consensus.
pub fn check_consensus(latest: &[bool], threshold: f64) -> ConsensusResult {
    if latest.is_empty() {
        return ConsensusResult {
            reached: false,
            majority: None,
            proportion: 0.0,
        };
    }
    let yes = latest.iter().filter(|&&d| d).count();
    let no = latest.len() - yes;
    let modal = yes.max(no);
    let proportion = modal as f64 / latest.len() as f64;
    let majority = (yes != no).then_some(yes > no);
    ConsensusResult {
        reached: majority.is_some() && proportion >= threshold,
        majority,
        proportion,
    }
}

const PREAMBLE: &str = "You take part in a discussion to solve a task.";
const INSTRUCTION: &str = "Consider the opinions of others in the discussion when making your prediction, and include this in your reason for making your decision.\n\nAlso consider the examples above, and your own knowledge of this task.\nThis is the discussion so far:\n";

/// The two debate-specific pieces of a participant prompt: the opening
/// "You are Agent i" sentence and the trailing discussion log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscussionContext {
    pub preamble: String,
    pub discussion: String,
}

impl fmt::Display for DiscussionContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.preamble, self.discussion)
    }
}

/// Renders visible messages as `Agent i` headers followed by canonical
/// answer blocks. With nothing visible only the preamble is produced.
pub fn render_discussion_context(
    visible: &[DebateMessage],
    self_index: usize,
) -> DiscussionContext {
    let preamble = format!("You are Agent {self_index}.  {PREAMBLE}");
    let mut discussion = String::new();
    if !visible.is_empty() {
        discussion.push_str("\n\n");
        discussion.push_str(INSTRUCTION);
        for m in visible {
            discussion.push_str(&format!(
                "\nAgent {}\n{}\n",
                m.display_index,
                render_answer(m.response.decision, m.response.reason.as_deref())
            ));
        }
    }
    DiscussionContext {
        preamble,
        discussion,
    }
}

pub trait PromptBuilder: Sync {
    fn build(
        &self,
        instance: &TabularInstance,
        display_index: usize,
        visible: &[DebateMessage],
    ) -> Result<String, TabularError>;
}

impl<F> PromptBuilder for F
where
    F: Fn(&TabularInstance, usize, &[DebateMessage]) -> Result<String, TabularError> + Sync,
{
    fn build(
        &self,
        instance: &TabularInstance,
        display_index: usize,
        visible: &[DebateMessage],
    ) -> Result<String, TabularError> {
        self(instance, display_index, visible)
    }
}

/// Builds participant prompts from a [`PromptTemplate`]'s debate sections.
pub struct TemplatePromptBuilder<'a> {
    pub template: &'a PromptTemplate,
    pub few_shot: &'a [TabularInstance],
}

impl PromptBuilder for TemplatePromptBuilder<'_> {
    fn build(
        &self,
        instance: &TabularInstance,
        display_index: usize,
        visible: &[DebateMessage],
    ) -> Result<String, TabularError> {
        let ctx = render_discussion_context(visible, display_index);
        build_debate_prompt(
            self.template,
            self.few_shot,
            instance,
            &ctx.preamble,
            &ctx.discussion,
        )
    }
}

/// Everything a debate needs besides the instance and its participants.
#[derive(Clone, Copy)]
pub struct DebateEnv<'a> {
    pub invoker: &'a dyn Invoke,
    pub prompts: &'a dyn PromptBuilder,
    /// Replay/record scope, e.g. `system1/collref`.
    pub scope: &'a str,
}

fn check_agents(agents: &[AgentSpec], config: &DebateConfig) -> Result<(), DebateError> {
    config.validate()?;
    let ids: Vec<&str> = agents.iter().map(|a| a.id.as_str()).collect();
    if ids
        != config
            .agent_order
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
    {
        return Err(DebateError::Config(format!(
            "agents {ids:?} do not match configured order {:?}",
            config.agent_order
        )));
    }
    Ok(())
}

fn take_turn(
    env: &DebateEnv<'_>,
    instance: &TabularInstance,
    agent: &AgentSpec,
    display_index: usize,
    round: u32,
    visible: &[DebateMessage],
) -> Result<DebateMessage, DebateError> {
    let prompt = env.prompts.build(instance, display_index, visible)?;
    let ctx = InvokeContext {
        scope: env.scope,
        instance,
        round,
        visible,
    };
    let response =
        env.invoker
            .invoke(agent, &prompt, &ctx)
            .map_err(|source| DebateError::Agent {
                agent_id: agent.id.clone(),
                round,
                source,
            })?;
    Ok(DebateMessage {
        agent_id: agent.id.clone(),
        display_index,
        round,
        response,
    })
}

pub fn run_memory_debate(
    instance: &TabularInstance,
    agents: &[AgentSpec],
    config: &DebateConfig,
    env: &DebateEnv<'_>,
) -> Result<Transcript, DebateError> {
    check_agents(agents, config)?;
    let mut messages: Vec<DebateMessage> = Vec::new();
    let mut latest = vec![false; agents.len()];
    for round in 1..=config.max_rounds {
        for (i, agent) in agents.iter().enumerate() {
            let visible: Vec<DebateMessage> = messages
                .iter()
                .filter(|m| config.include_own_history || m.agent_id != agent.id)
                .cloned()
                .collect();
            let msg = take_turn(env, instance, agent, i, round, &visible)?;
            latest[i] = msg.response.decision;
            messages.push(msg);
        }
        let consensus = check_consensus(&latest, config.threshold);
        if let (true, Some(decision)) = (consensus.reached, consensus.majority) {
            return Ok(Transcript {
                instance_id: instance.id,
                config: config.clone(),
                messages,
                outcome: Outcome {
                    decision,
                    via: DecisionVia::Consensus,
                    rounds_used: round,
                },
            });
        }
    }
    Ok(Transcript {
        instance_id: instance.id,
        config: config.clone(),
        messages,
        outcome: Outcome {
            decision: latest[agents.len() - 1],
            via: DecisionVia::Fallback,
            rounds_used: config.max_rounds,
        },
    })
}

/// Runs one CollRef round with the agents queried concurrently. Results
/// keep configured order.
fn collref_round(
    env: &DebateEnv<'_>,
    instance: &TabularInstance,
    agents: &[AgentSpec],
    round: u32,
    previous: &[DebateMessage],
) -> Result<Vec<DebateMessage>, DebateError> {
    let results: Vec<Result<DebateMessage, DebateError>> = std::thread::scope(|s| {
        let handles: Vec<_> = agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                s.spawn(move || {
                    let visible: Vec<DebateMessage> = previous
                        .iter()
                        .filter(|m| m.agent_id != agent.id)
                        .cloned()
                        .collect();
                    take_turn(env, instance, agent, i, round, &visible)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("debate agent thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

pub fn run_collref_debate(
    instance: &TabularInstance,
    agents: &[AgentSpec],
    config: &DebateConfig,
    env: &DebateEnv<'_>,
) -> Result<Transcript, DebateError> {
    check_agents(agents, config)?;
    let mut messages = Vec::new();
    let mut current = collref_round(env, instance, agents, 0, &[])?;
    for round in 0..=config.max_rounds {
        if round > 0 {
            current = collref_round(env, instance, agents, round, &current)?;
        }
        let latest: Vec<bool> = current.iter().map(|m| m.response.decision).collect();
        messages.extend(current.iter().cloned());
        let consensus = check_consensus(&latest, config.threshold);
        if let (true, Some(decision)) = (consensus.reached, consensus.majority) {
            return Ok(Transcript {
                instance_id: instance.id,
                config: config.clone(),
                messages,
                outcome: Outcome {
                    decision,
                    via: DecisionVia::Consensus,
                    rounds_used: round,
                },
            });
        }
    }
    let last = current
        .last()
        .map(|m| m.response.decision)
        .expect("at least two agents");
    Ok(Transcript {
        instance_id: instance.id,
        config: config.clone(),
        messages,
        outcome: Outcome {
            decision: last,
            via: DecisionVia::Fallback,
            rounds_used: config.max_rounds,
        },
    })
}

pub fn run_debate(
    instance: &TabularInstance,
    agents: &[AgentSpec],
    config: &DebateConfig,
    env: &DebateEnv<'_>,
) -> Result<Transcript, DebateError> {
    match config.paradigm {
        Paradigm::Memory => run_memory_debate(instance, agents, config, env),
        Paradigm::CollRef => run_collref_debate(instance, agents, config, env),
    }
}

/// Recomputes the outcome of a transcript from its messages alone, checking
/// consensus at every round boundary in order.
pub fn final_decision(
    messages: &[DebateMessage],
    config: &DebateConfig,
) -> Result<Outcome, DebateError> {
    let n = config.agent_order.len();
    let position = |id: &str| config.agent_order.iter().position(|a| a == id);
    let mut latest: Vec<Option<bool>> = vec![None; n];
    let mut idx = 0;
    let mut round = config.first_round();
    let mut last_round = None;
    while idx < messages.len() {
        let mut seen = 0;
        while idx < messages.len() && messages[idx].round == round {
            let m = &messages[idx];
            let pos = position(&m.agent_id).ok_or_else(|| {
                DebateError::Incomplete(format!("message from unknown agent `{}`", m.agent_id))
            })?;
            latest[pos] = Some(m.response.decision);
            seen += 1;
            idx += 1;
        }
        if seen != n {
            return Err(DebateError::Incomplete(format!(
                "round {round} has {seen} messages, expected {n}"
            )));
        }
        let decisions: Vec<bool> = latest.iter().map(|d| d.expect("round complete")).collect();
        let consensus = check_consensus(&decisions, config.threshold);
        if let (true, Some(decision)) = (consensus.reached, consensus.majority) {
            if idx != messages.len() {
                return Err(DebateError::Incomplete(format!(
                    "messages continue after consensus in round {round}"
                )));
            }
            return Ok(Outcome {
                decision,
                via: DecisionVia::Consensus,
                rounds_used: round,
            });
        }
        last_round = Some(round);
        round += 1;
    }
    let last_round = last_round.ok_or_else(|| DebateError::Incomplete("no messages".into()))?;
    Ok(Outcome {
        decision: latest[n - 1].expect("round complete"),
        via: DecisionVia::Fallback,
        rounds_used: last_round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Invoker, MockRule};
    use std::collections::BTreeMap;

    fn instance() -> TabularInstance {
        TabularInstance {
            id: 7,
            features: BTreeMap::new(),
            label: true,
            group: "Male".into(),
        }
    }

    fn constants(values: &[bool]) -> Vec<AgentSpec> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| AgentSpec::mock(&format!("a{i}"), MockRule::Constant { value: v }))
            .collect()
    }

    fn order(agents: &[AgentSpec]) -> Vec<String> {
        agents.iter().map(|a| a.id.clone()).collect()
    }

    fn prompts(_: &TabularInstance, i: usize, v: &[DebateMessage]) -> Result<String, TabularError> {
        Ok(render_discussion_context(v, i).to_string())
    }

    #[test]
    fn consensus_cases() {
        let r = check_consensus(&[true, true, true], 1.0);
        assert!(r.reached);
        assert_eq!(r.majority, Some(true));
        assert_eq!(r.proportion, 1.0);

        let r = check_consensus(&[true, true, false], 1.0);
        assert!(!r.reached);
        assert!((r.proportion - 2.0 / 3.0).abs() < 1e-15);

        let r = check_consensus(&[true, true, false], 0.6);
        assert!(r.reached);
        assert_eq!(r.majority, Some(true));

        let r = check_consensus(&[true, false], 0.51);
        assert!(!r.reached);
        assert_eq!(r.majority, None);
    }

    #[test]
    fn config_validation() {
        let ok = DebateConfig::new(Paradigm::Memory, 5, 1.0, vec!["a".into(), "b".into()]);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.threshold = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.max_rounds = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.agent_order = vec!["a".into(), "a".into()];
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.agent_order.truncate(1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn memory_unanimity_stops_in_round_one() {
        let agents = constants(&[true, true, true]);
        let config = DebateConfig::new(Paradigm::Memory, 5, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_memory_debate(&instance(), &agents, &config, &env).unwrap();
        assert_eq!(t.messages.len(), 3);
        assert_eq!(
            t.outcome,
            Outcome {
                decision: true,
                via: DecisionVia::Consensus,
                rounds_used: 1
            }
        );
        assert_eq!(final_decision(&t.messages, &config).unwrap(), t.outcome);
    }

    #[test]
    fn memory_fallback_uses_last_agent() {
        let agents = constants(&[true, true, false]);
        let config = DebateConfig::new(Paradigm::Memory, 5, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_memory_debate(&instance(), &agents, &config, &env).unwrap();
        assert_eq!(t.messages.len(), 15);
        assert_eq!(
            t.outcome,
            Outcome {
                decision: false,
                via: DecisionVia::Fallback,
                rounds_used: 5
            }
        );
        assert_eq!(final_decision(&t.messages, &config).unwrap(), t.outcome);
    }

    #[test]
    fn collref_unanimity_stops_after_drafts() {
        let agents = constants(&[false, false, false]);
        let config = DebateConfig::new(Paradigm::CollRef, 5, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_collref_debate(&instance(), &agents, &config, &env).unwrap();
        assert_eq!(t.messages.len(), 3);
        assert!(t.messages.iter().all(|m| m.round == 0));
        assert_eq!(
            t.outcome,
            Outcome {
                decision: false,
                via: DecisionVia::Consensus,
                rounds_used: 0
            }
        );
    }

    #[test]
    fn collref_conformists_converge_on_majority() {
        // drafts [true, true, false]; agents 0 and 1 see a tie and keep
        // their own base rule (true), agent 2 sees [true, true].
        let agents = vec![
            AgentSpec::mock(
                "a0",
                MockRule::Conformist {
                    fallback: Box::new(MockRule::Constant { value: true }),
                },
            ),
            AgentSpec::mock(
                "a1",
                MockRule::Conformist {
                    fallback: Box::new(MockRule::Constant { value: true }),
                },
            ),
            AgentSpec::mock(
                "a2",
                MockRule::Conformist {
                    fallback: Box::new(MockRule::Constant { value: false }),
                },
            ),
        ];
        let config = DebateConfig::new(Paradigm::CollRef, 5, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_collref_debate(&instance(), &agents, &config, &env).unwrap();
        let drafts: Vec<bool> = t.messages[..3]
            .iter()
            .map(|m| m.response.decision)
            .collect();
        let refined: Vec<bool> = t.messages[3..6]
            .iter()
            .map(|m| m.response.decision)
            .collect();
        assert_eq!(drafts, vec![true, true, false]);
        assert_eq!(refined, vec![true, true, true]);
        assert_eq!(
            t.outcome,
            Outcome {
                decision: true,
                via: DecisionVia::Consensus,
                rounds_used: 1
            }
        );
    }

    #[test]
    fn collref_stubborn_disagreement_falls_back() {
        let agents = vec![
            AgentSpec::mock(
                "a0",
                MockRule::Stubborn {
                    rule: Box::new(MockRule::Constant { value: false }),
                },
            ),
            AgentSpec::mock(
                "a1",
                MockRule::Stubborn {
                    rule: Box::new(MockRule::Constant { value: false }),
                },
            ),
            AgentSpec::mock(
                "a2",
                MockRule::Stubborn {
                    rule: Box::new(MockRule::Constant { value: true }),
                },
            ),
        ];
        let config = DebateConfig::new(Paradigm::CollRef, 3, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_collref_debate(&instance(), &agents, &config, &env).unwrap();
        assert_eq!(t.messages.len(), 3 * 4);
        assert_eq!(
            t.outcome,
            Outcome {
                decision: true,
                via: DecisionVia::Fallback,
                rounds_used: 3
            }
        );
        assert_eq!(final_decision(&t.messages, &config).unwrap(), t.outcome);
    }

    #[test]
    fn discussion_context_layout() {
        let msg = |agent: usize, d: bool, reason: &str| DebateMessage {
            agent_id: format!("a{agent}"),
            display_index: agent,
            round: 1,
            response: AgentResponse::from_raw(render_answer(d, Some(reason)), 0).unwrap(),
        };
        let empty = render_discussion_context(&[], 2).to_string();
        assert_eq!(
            empty,
            "You are Agent 2.  You take part in a discussion to solve a task."
        );
        assert!(!empty.contains("Agent 0"));

        let text =
            render_discussion_context(&[msg(0, false, "x"), msg(1, true, "y")], 2).to_string();
        let a0 = text.find("\nAgent 0\n").unwrap();
        let a1 = text.find("\nAgent 1\n").unwrap();
        assert!(a0 < a1);
        assert!(text.contains("Consider the opinions of others in the discussion"));
    }

    #[test]
    fn mismatched_agents_rejected() {
        let agents = constants(&[true, true]);
        let config = DebateConfig::new(Paradigm::Memory, 1, 1.0, vec!["x".into(), "y".into()]);
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        assert!(matches!(
            run_memory_debate(&instance(), &agents, &config, &env),
            Err(DebateError::Config(_))
        ));
    }

    #[test]
    fn final_decision_rejects_incomplete_rounds() {
        let agents = constants(&[true, false, true]);
        let config = DebateConfig::new(Paradigm::Memory, 2, 1.0, order(&agents));
        let invoker = Invoker::new();
        let env = DebateEnv {
            invoker: &invoker,
            prompts: &prompts,
            scope: "t",
        };
        let t = run_memory_debate(&instance(), &agents, &config, &env).unwrap();
        assert!(final_decision(&t.messages[..4], &config).is_err());
        assert!(final_decision(&[], &config).is_err());
    }
}
