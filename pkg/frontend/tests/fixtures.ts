import type { LossSeriesEntry, ReviewPacketData } from '../src/types'

function action(kind: 'tool_call' | 'reasoning' | 'final_answer', extra: Partial<ReviewPacketData['planned']['steps'][0]['action']> = {}) {
  return { kind, tool_name: null, arguments: {}, text: null, ...extra }
}

export function canyonPacket(): ReviewPacketData {
  const queryMissed = action('tool_call', {
    tool_name: 'query_entity',
    arguments: { name: 'Canyon Flavor Restaurant' },
  })
  return {
    inspection_id: 'run-1-insp-1',
    run_id: 'run-1',
    task: {
      id: 'canyon-day-trip',
      goal_text: 'Plan a one-day trip with the must-eat restaurant.',
      constraints: [
        { id: 'C1', kind: 'hard', predicate_ref: 'P1', description: 'canyon visited' },
        { id: 'C2', kind: 'hard', predicate_ref: 'P2', description: 'within budget' },
        { id: 'C3', kind: 'hard', predicate_ref: 'P3', description: 'inside opening hours' },
        { id: 'C4', kind: 'hard', predicate_ref: 'P4', description: 'must-eat restaurant included' },
      ],
      answer_format: null,
    },
    planned: {
      steps: [
        { index: 0, state_digest: '', action: action('reasoning', { text: 'Goal: plan the day.' }), expected_outcome: null },
        {
          index: 1,
          state_digest: '',
          action: action('tool_call', { tool_name: 'query_entity', arguments: { name: 'Enshi Grand Canyon' } }),
          expected_outcome: { status: 'ok', payload_contains: 'rating' },
        },
        {
          index: 2,
          state_digest: '',
          action: action('tool_call', { tool_name: 'book_entity', arguments: { name: 'Enshi Grand Canyon', day: 0 } }),
          expected_outcome: null,
        },
        { index: 3, state_digest: '', action: queryMissed, expected_outcome: { status: 'ok', payload_contains: 'rating' } },
        { index: 4, state_digest: '', action: action('final_answer', { text: 'Day plan.' }), expected_outcome: null },
      ],
      provenance: 'planned',
      parent_iteration: null,
      preserved_prefix_len: null,
      plan_text: null,
      degenerate: false,
    },
    trace: {
      steps: [
        { index: 0, realized_action: action('reasoning', { text: 'Goal: plan the day.' }), outcome: { status: 'ok', payload: 'noted' }, mismatch_severity: 0 },
        {
          index: 1,
          realized_action: action('tool_call', { tool_name: 'query_entity', arguments: { name: 'Enshi Grand Canyon' } }),
          outcome: { status: 'ok', payload: '{"name":"Enshi Grand Canyon","rating":4.9}' },
          mismatch_severity: 0,
        },
        {
          index: 2,
          realized_action: action('tool_call', { tool_name: 'book_entity', arguments: { name: 'Enshi Grand Canyon', day: 0 } }),
          outcome: { status: 'ok', payload: 'booked Enshi Grand Canyon day 0' },
          mismatch_severity: 0,
        },
        { index: 3, realized_action: queryMissed, outcome: { status: 'ok', payload: 'not found: Canyon Flavor Restaurant' }, mismatch_severity: 0.5 },
        { index: 4, realized_action: action('final_answer', { text: 'Day plan.' }), outcome: { status: 'ok', payload: 'Day plan.' }, mismatch_severity: 0 },
      ],
      terminal_outcome: { status: 'ok', payload: 'Day plan.' },
      terminated_early: false,
      token_usage: { input_tokens: 940, output_tokens: 320 },
    },
    loss: { goal_loss: 0.25, divergence: 0.1, cost: 3, threshold_used: 0.5, divergence_point: 3 },
    computed_break_index: 3,
    constraint_verdicts: { C1: 'satisfied', C2: 'satisfied', C3: 'satisfied', C4: 'violated' },
  }
}

export function perfectPacket(): ReviewPacketData {
  const packet = canyonPacket()
  return {
    ...packet,
    loss: { goal_loss: 0, divergence: 0, cost: 3, threshold_used: 0.5, divergence_point: null },
    computed_break_index: null,
    constraint_verdicts: { C1: 'satisfied', C2: 'satisfied', C3: 'satisfied', C4: 'satisfied' },
  }
}

export function threeIterationSeries(): LossSeriesEntry[] {
  const loss = (goal: number, divergence: number, cost: number) => ({
    goal_loss: goal,
    divergence,
    cost,
    threshold_used: 0.5,
    divergence_point: null,
  })
  return [
    { r: 0, candidate_loss: loss(0.25, 0.1, 4), incumbent_loss: loss(0.5, 0.25, 4), accepted: true, early_exit: false },
    { r: 1, candidate_loss: loss(0.3, 0.2, 4), incumbent_loss: loss(0.25, 0.1, 4), accepted: false, early_exit: false },
    { r: 2, candidate_loss: loss(0.1, 0.0, 4), incumbent_loss: loss(0.25, 0.1, 4), accepted: true, early_exit: false },
  ]
}
