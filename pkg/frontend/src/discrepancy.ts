// View model for the plan-vs-trace discrepancy review: side-by-side rows
// with severity coloring, the computed break pre-highlighted, constraint
// status, and the loss summary.

import type { ActionData, ReviewPacketData } from './types'

export type SeverityClass = 'match' | 'soft' | 'hard' | 'missing'

export interface DiscrepancyRow {
  index: number
  plannedLabel: string | null
  expectedLabel: string | null
  executedLabel: string | null
  outcomeStatus: string | null
  outcomePayload: string | null
  severity: number
  severityClass: SeverityClass
  isComputedBreak: boolean
}

export interface ConstraintRow {
  id: string
  kind: string
  description: string
  verdict: 'satisfied' | 'violated' | 'undecidable' | 'unknown'
  symbol: '✓' | '✗' | '?'
}

export interface DiscrepancyView {
  inspectionId: string
  runId: string
  goalText: string
  rows: DiscrepancyRow[]
  constraints: ConstraintRow[]
  summary: {
    goalLoss: number
    divergence: number
    cost: number
    computedBreakIndex: number | null
    billedTokens: number
    terminatedEarly: boolean
  }
  zeroDivergence: boolean
}

export function actionLabel(action: ActionData): string {
  if (action.kind === 'tool_call') {
    return `${action.tool_name}(${JSON.stringify(action.arguments)})`
  }
  if (action.kind === 'final_answer') {
    return `final: ${action.text ?? ''}`
  }
  return action.text ?? ''
}

function severityClass(severity: number): SeverityClass {
  if (severity === 0) return 'match'
  if (severity < 1) return 'soft'
  return 'hard'
}

export function buildDiscrepancyView(packet: ReviewPacketData): DiscrepancyView {
  const rows: DiscrepancyRow[] = []
  const planned = packet.planned.steps
  const executed = packet.trace.steps
  const count = Math.max(planned.length, executed.length)
  for (let i = 0; i < count; i++) {
    const plan = planned[i]
    const real = executed[i]
    const severity = real?.mismatch_severity ?? 0
    rows.push({
      index: i,
      plannedLabel: plan ? actionLabel(plan.action) : null,
      expectedLabel: plan?.expected_outcome?.payload_contains ?? null,
      executedLabel: real ? actionLabel(real.realized_action) : null,
      outcomeStatus: real?.outcome.status ?? null,
      outcomePayload: real?.outcome.payload ?? null,
      severity,
      severityClass: real ? severityClass(severity) : 'missing',
      isComputedBreak: packet.computed_break_index !== null && i === packet.computed_break_index,
    })
  }
  const verdicts = packet.constraint_verdicts ?? {}
  const constraints: ConstraintRow[] = packet.task.constraints.map((c) => {
    const verdict = verdicts[c.id] ?? 'unknown'
    const symbol = verdict === 'satisfied' ? '✓' : verdict === 'violated' ? '✗' : '?'
    return { id: c.id, kind: c.kind, description: c.description, verdict, symbol }
  })
  const usage = packet.trace.token_usage
  return {
    inspectionId: packet.inspection_id,
    runId: packet.run_id,
    goalText: packet.task.goal_text,
    rows,
    constraints,
    summary: {
      goalLoss: packet.loss.goal_loss,
      divergence: packet.loss.divergence,
      cost: packet.loss.cost,
      computedBreakIndex: packet.computed_break_index,
      billedTokens: usage.input_tokens + usage.output_tokens,
      terminatedEarly: packet.trace.terminated_early,
    },
    zeroDivergence: packet.loss.divergence === 0,
  }
}

/** A packet whose run has moved on is shown read-only with a refresh hint. */
export function isStale(view: DiscrepancyView, pendingIds: string[]): boolean {
  return !pendingIds.includes(view.inspectionId)
}
