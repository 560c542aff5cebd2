// Payload shapes of the run-service HTTP API.

export interface LossBreakdown {
  goal_loss: number
  divergence: number
  cost: number
  threshold_used: number
  divergence_point: number | null
}

export interface ActionData {
  kind: 'tool_call' | 'reasoning' | 'final_answer'
  tool_name: string | null
  arguments: Record<string, unknown>
  text: string | null
}

export interface ExpectedOutcomeData {
  status: string
  payload_contains: string | null
}

export interface StepData {
  index: number
  state_digest: string
  action: ActionData
  expected_outcome: ExpectedOutcomeData | null
}

export interface OutcomeData {
  status: 'ok' | 'tool_error' | 'infeasible' | 'timeout'
  payload: string
}

export interface ExecutedStepData {
  index: number
  realized_action: ActionData
  outcome: OutcomeData
  mismatch_severity: number
}

export interface TrajectoryData {
  steps: StepData[]
  provenance: string
  parent_iteration: number | null
  preserved_prefix_len: number | null
  plan_text: string | null
  degenerate: boolean
}

export interface TraceData {
  steps: ExecutedStepData[]
  terminal_outcome: OutcomeData | null
  terminated_early: boolean
  token_usage: { input_tokens: number; output_tokens: number }
}

export interface ConstraintData {
  id: string
  kind: 'hard' | 'soft'
  predicate_ref: string
  description: string
}

export interface TaskData {
  id: string
  goal_text: string
  constraints: ConstraintData[]
  answer_format: string | null
}

export interface ReviewPacketData {
  inspection_id: string
  run_id: string
  task: TaskData
  planned: TrajectoryData
  trace: TraceData
  loss: LossBreakdown
  computed_break_index: number | null
  constraint_verdicts: Record<string, 'satisfied' | 'violated' | 'undecidable'> | null
}

export interface PendingInspectionData {
  inspection_id: string
  run_id: string
  packet: ReviewPacketData
  deadline: number
  created_at: number
}

export interface EventData {
  seq: number
  kind: string
  iteration: number | null
  payload: Record<string, unknown>
  wall_time: number
}

export interface LossSeriesEntry {
  r: number
  candidate_loss: LossBreakdown
  incumbent_loss: LossBreakdown
  accepted: boolean
  early_exit: boolean
}

export interface RunSummaryData {
  run_id: string
  status: 'running' | 'awaiting_feedback' | 'finished' | 'failed'
  latest_loss: LossBreakdown | null
  iterations: LossSeriesEntry[]
  goal_score: number | null
}

export interface FeedbackPayload {
  observed_failure: string
  downstream_manifestation: string
  earliest_break_index: number
  repair_instruction: string
  goal_score: number | null
}
