// Feedback form state: prefilled from the packet, validated client-side with
// exactly the server's rules (so nothing the server would accept is ever
// blocked), and resilient to 409/422 without losing what the operator typed.

import type { FeedbackPayload, ReviewPacketData } from './types'

export interface FeedbackFormState {
  inspectionId: string
  traceLen: number
  observedFailure: string
  downstreamManifestation: string
  repairInstruction: string
  breakIndex: number
  computedBreakIndex: number | null
  confirmedComputedBreak: boolean
  goalScoreRaw: string // optional free text; empty means "no override"
  error: string | null
  resolved: boolean
}

export const NONE_SENTINEL = 'none'

export function initFeedbackForm(packet: ReviewPacketData): FeedbackFormState {
  const zeroDivergence = packet.loss.divergence === 0
  const computed = packet.computed_break_index
  return {
    inspectionId: packet.inspection_id,
    traceLen: packet.trace.steps.length,
    observedFailure: zeroDivergence ? NONE_SENTINEL : '',
    downstreamManifestation: zeroDivergence ? NONE_SENTINEL : '',
    repairInstruction: zeroDivergence ? NONE_SENTINEL : '',
    breakIndex: computed ?? 0,
    computedBreakIndex: computed,
    confirmedComputedBreak: true, // editing the index flips this to an override
    goalScoreRaw: '',
    error: null,
    resolved: false,
  }
}

export function setBreakIndex(state: FeedbackFormState, index: number): FeedbackFormState {
  return {
    ...state,
    breakIndex: index,
    confirmedComputedBreak: state.computedBreakIndex !== null && index === state.computedBreakIndex,
  }
}

/** Mirror of the server's submission rules. */
export function validateForm(state: FeedbackFormState): string[] {
  const errors: string[] = []
  const fields: Array<[string, string]> = [
    ['observed failure', state.observedFailure],
    ['downstream manifestation', state.downstreamManifestation],
    ['repair instruction', state.repairInstruction],
  ]
  for (const [label, value] of fields) {
    if (!value.trim()) errors.push(`${label} must be nonempty`)
  }
  const upper = Math.max(0, state.traceLen - 1)
  if (!Number.isInteger(state.breakIndex) || state.breakIndex < 0 || state.breakIndex > upper) {
    errors.push(`break index must be in [0, ${upper}]`)
  }
  if (state.goalScoreRaw.trim()) {
    const score = Number(state.goalScoreRaw)
    if (!Number.isFinite(score) || score < 0 || score > 1) {
      errors.push('goal score must be a number in [0, 1]')
    }
  }
  return errors
}

export function submissionPayload(state: FeedbackFormState): FeedbackPayload {
  const raw = state.goalScoreRaw.trim()
  return {
    observed_failure: state.observedFailure,
    downstream_manifestation: state.downstreamManifestation,
    earliest_break_index: state.breakIndex,
    repair_instruction: state.repairInstruction,
    goal_score: raw ? Number(raw) : null,
  }
}

/** Fold a server rejection into the form without clearing any field. */
export function applyServerResult(
  state: FeedbackFormState,
  status: number,
  detail: string,
): FeedbackFormState {
  if (status === 200) {
    return { ...state, error: null, resolved: true }
  }
  if (status === 409) {
    return { ...state, error: 'already resolved by another operator', resolved: true }
  }
  if (status === 422) {
    return { ...state, error: detail || 'submission rejected: validation failed' }
  }
  return { ...state, error: `submission failed (HTTP ${status})` }
}
