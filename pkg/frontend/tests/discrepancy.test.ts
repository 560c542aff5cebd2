import { describe, expect, it } from 'vitest'

import { actionLabel, buildDiscrepancyView, isStale } from '../src/discrepancy'
import { canyonPacket, perfectPacket } from './fixtures'

describe('buildDiscrepancyView', () => {
  it('pairs planned and executed steps side by side', () => {
    const view = buildDiscrepancyView(canyonPacket())
    expect(view.rows).toHaveLength(5)
    expect(view.rows[1]!.plannedLabel).toContain('query_entity')
    expect(view.rows[1]!.executedLabel).toContain('Enshi Grand Canyon')
    expect(view.rows[1]!.expectedLabel).toBe('rating')
  })

  it('colors rows by severity class', () => {
    const view = buildDiscrepancyView(canyonPacket())
    expect(view.rows.map((r) => r.severityClass)).toEqual([
      'match',
      'match',
      'match',
      'soft',
      'match',
    ])
  })

  it('pre-highlights the computed break', () => {
    const view = buildDiscrepancyView(canyonPacket())
    const highlighted = view.rows.filter((r) => r.isComputedBreak)
    expect(highlighted).toHaveLength(1)
    expect(highlighted[0]!.index).toBe(3)
    expect(highlighted[0]!.executedLabel).toContain('Canyon Flavor Restaurant')
  })

  it('reports constraint verdict symbols', () => {
    const view = buildDiscrepancyView(canyonPacket())
    const bySymbol = Object.fromEntries(view.constraints.map((c) => [c.id, c.symbol]))
    expect(bySymbol).toEqual({ C1: '✓', C2: '✓', C3: '✓', C4: '✗' })
  })

  it('summarizes loss and token usage', () => {
    const view = buildDiscrepancyView(canyonPacket())
    expect(view.summary.goalLoss).toBe(0.25)
    expect(view.summary.cost).toBe(3)
    expect(view.summary.billedTokens).toBe(1260)
    expect(view.summary.computedBreakIndex).toBe(3)
  })

  it('zero-divergence packet has no highlight', () => {
    const view = buildDiscrepancyView(perfectPacket())
    expect(view.zeroDivergence).toBe(true)
    expect(view.rows.every((r) => !r.isComputedBreak)).toBe(true)
  })

  it('marks unexecuted planned steps as missing', () => {
    const packet = canyonPacket()
    packet.trace.steps = packet.trace.steps.slice(0, 2)
    packet.trace.terminated_early = true
    const view = buildDiscrepancyView(packet)
    expect(view.rows[4]!.severityClass).toBe('missing')
    expect(view.rows[4]!.executedLabel).toBeNull()
    expect(view.summary.terminatedEarly).toBe(true)
  })

  it('detects staleness against the live pending set', () => {
    const view = buildDiscrepancyView(canyonPacket())
    expect(isStale(view, ['run-1-insp-1'])).toBe(false)
    expect(isStale(view, ['other'])).toBe(true)
  })
})

describe('actionLabel', () => {
  it('renders tool calls with their arguments', () => {
    expect(
      actionLabel({ kind: 'tool_call', tool_name: 'web_search', arguments: { query: 'x' }, text: null }),
    ).toBe('web_search({"query":"x"})')
  })

  it('renders final answers distinctly', () => {
    expect(actionLabel({ kind: 'final_answer', tool_name: null, arguments: {}, text: '42' })).toBe('final: 42')
  })
})
