import { describe, expect, it } from 'vitest'

import {
  NONE_SENTINEL,
  applyServerResult,
  initFeedbackForm,
  setBreakIndex,
  submissionPayload,
  validateForm,
} from '../src/form'
import { canyonPacket, perfectPacket } from './fixtures'

describe('initFeedbackForm', () => {
  it('prefills the break index with the computed divergence point', () => {
    const form = initFeedbackForm(canyonPacket())
    expect(form.breakIndex).toBe(3)
    expect(form.confirmedComputedBreak).toBe(true)
  })

  it('zero-divergence packet prefills the none sentinel', () => {
    const form = initFeedbackForm(perfectPacket())
    expect(form.observedFailure).toBe(NONE_SENTINEL)
    expect(form.repairInstruction).toBe(NONE_SENTINEL)
    expect(validateForm(form)).toEqual([])
  })

  it('editing the index is recorded as an override', () => {
    let form = initFeedbackForm(canyonPacket())
    form = setBreakIndex(form, 1)
    expect(form.confirmedComputedBreak).toBe(false)
    form = setBreakIndex(form, 3)
    expect(form.confirmedComputedBreak).toBe(true)
  })
})

describe('validateForm mirrors the server rules', () => {
  it('flags empty fields', () => {
    const form = initFeedbackForm(canyonPacket())
    expect(validateForm(form).join(' ')).toContain('observed failure')
  })

  it('flags out-of-bounds break index', () => {
    let form = initFeedbackForm(canyonPacket())
    form = { ...form, observedFailure: 'a', downstreamManifestation: 'b', repairInstruction: 'c' }
    expect(validateForm(form)).toEqual([])
    form = setBreakIndex(form, 99)
    expect(validateForm(form).join(' ')).toContain('break index')
  })

  it('accepts anything the server accepts (no over-blocking)', () => {
    // boundary cases the server allows: index 0, index len-1, goal 0 and 1
    let form = initFeedbackForm(canyonPacket())
    form = { ...form, observedFailure: 'a', downstreamManifestation: 'b', repairInstruction: 'c' }
    for (const index of [0, form.traceLen - 1]) {
      for (const goal of ['', '0', '1', '0.5']) {
        const candidate = { ...setBreakIndex(form, index), goalScoreRaw: goal }
        expect(validateForm(candidate)).toEqual([])
      }
    }
  })

  it('rejects non-numeric goal override', () => {
    let form = initFeedbackForm(canyonPacket())
    form = {
      ...form,
      observedFailure: 'a',
      downstreamManifestation: 'b',
      repairInstruction: 'c',
      goalScoreRaw: 'high',
    }
    expect(validateForm(form).join(' ')).toContain('goal score')
  })
})

describe('submissionPayload', () => {
  it('maps to the wire schema', () => {
    let form = initFeedbackForm(canyonPacket())
    form = {
      ...form,
      observedFailure: 'missed C4',
      downstreamManifestation: 'booking failed',
      repairInstruction: 'use the variant name',
      goalScoreRaw: ' 0.75 ',
    }
    expect(submissionPayload(form)).toEqual({
      observed_failure: 'missed C4',
      downstream_manifestation: 'booking failed',
      earliest_break_index: 3,
      repair_instruction: 'use the variant name',
      goal_score: 0.75,
    })
  })

  it('empty goal input means no override', () => {
    const form = initFeedbackForm(canyonPacket())
    expect(submissionPayload(form).goal_score).toBeNull()
  })
})

describe('applyServerResult', () => {
  const filled = {
    ...initFeedbackForm(canyonPacket()),
    observedFailure: 'kept text',
    downstreamManifestation: 'also kept',
    repairInstruction: 'still here',
  }

  it('422 surfaces inline and preserves every field', () => {
    const next = applyServerResult(filled, 422, 'earliest_break_index must be in [0, 4]')
    expect(next.error).toContain('earliest_break_index')
    expect(next.resolved).toBe(false)
    expect(next.observedFailure).toBe('kept text')
    expect(next.repairInstruction).toBe('still here')
  })

  it('409 marks the entry already resolved without losing state', () => {
    const next = applyServerResult(filled, 409, 'inspection already resolved')
    expect(next.resolved).toBe(true)
    expect(next.error).toContain('already resolved')
    expect(next.downstreamManifestation).toBe('also kept')
  })

  it('200 clears the error and resolves', () => {
    const next = applyServerResult(filled, 200, '')
    expect(next.resolved).toBe(true)
    expect(next.error).toBeNull()
  })
})
