//! The batched stack machine.
//!
//! One [`BatchState`] holds the stacks of `B` sentences as two tensors,
//! `S_h` (`B×(D+1)×L×2×H`, hidden and cell state of every layer) and `S_e`
//! (`B×(D+1)×E`, stack element embeddings), plus integer pointer vectors.
//! Slot 0 of `S_h` holds the initial recurrent state, so real stack
//! elements live at slots `1..=D` and `p_h[i] == 0` means row `i` is empty.
//! Slots above a row's `p_h` are never read, which lets copies of a state
//! carry fewer than `D+1` slots; [`apply_step`] grows them when a push
//! needs room.
//! [`apply_step`] advances every row by one action using only indexed
//! reads and writes over whole rows sets, never a loop over sentences in
//! tensor code.

use rnng_tensor::{Array, Backend};

use crate::error::{Error, Result};
use crate::treebank::Action;

/// Extents of one stack element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackDims {
    pub layers: usize,
    pub hidden: usize,
    pub emb: usize,
}

/// Model callbacks used by [`apply_step`].
pub trait ModelHooks<B: Backend> {
    /// `n` token ids to `n×E` rows.
    fn word_emb(&self, bk: &B, tokens: &[u32]) -> Result<B::Tensor>;
    /// `n` nonterminal ids to `n×E` rows.
    fn nt_emb(&self, bk: &B, nts: &[u32]) -> Result<B::Tensor>;
    /// `R×K×E` zero-padded children (open nonterminal first) to `R×E`.
    fn compose(&self, bk: &B, children: &B::Tensor, lengths: &[usize]) -> Result<B::Tensor>;
    /// `n×L×2×H` previous states and `n×E` inputs to `n×L×2×H` new states.
    fn recur(&self, bk: &B, prev: &B::Tensor, input: &B::Tensor) -> Result<B::Tensor>;
}

pub struct BatchState<B: Backend> {
    pub s_h: B::Tensor,
    pub s_e: B::Tensor,
    /// Stack-top slot per row.
    pub p_h: Vec<usize>,
    /// Row-major `B×D`: slot of the `d`-th open nonterminal of each row.
    pub q: Vec<usize>,
    /// Index of the innermost open nonterminal in `q`, −1 when none.
    pub p_q: Vec<isize>,
    /// Next-token cursor.
    pub b: Vec<usize>,
    /// Set once the root constituent has been closed.
    pub finished: Vec<bool>,
    batch: usize,
    depth: usize,
    /// Allocated extent of the slot axis, at most `depth + 1`.
    slots: usize,
    dims: StackDims,
}

/// Spare slots kept above the highest stack top when a state is copied.
const HEADROOM: usize = 8;

/// Copies slots `0..=p_h[j]` of `src[rows[j]]` into row `offset + j` of `dst`.
fn copy_live<B: Backend>(bk: &B, src: &B::Tensor, dst: B::Tensor, rows: &[usize], p_h: &[usize], offset: usize) -> Result<B::Tensor> {
    let n: usize = rows.iter().map(|&r| p_h[r] + 1).sum();
    let (mut sr, mut sc, mut dr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (j, &r) in rows.iter().enumerate() {
        for s in 0..=p_h[r] {
            sr.push(r);
            sc.push(s);
            dr.push(offset + j);
        }
    }
    let picked = bk.select(src, &sr, Some(&sc))?;
    Ok(bk.assign(dst, &dr, Some(&sc), &picked)?)
}

impl<B: Backend> Clone for BatchState<B> {
    fn clone(&self) -> Self {
        Self {
            s_h: self.s_h.clone(),
            s_e: self.s_e.clone(),
            p_h: self.p_h.clone(),
            q: self.q.clone(),
            p_q: self.p_q.clone(),
            b: self.b.clone(),
            finished: self.finished.clone(),
            batch: self.batch,
            depth: self.depth,
            slots: self.slots,
            dims: self.dims,
        }
    }
}

/// Fresh state: empty stacks with `initial` (`L×2×H`) in slot 0.
pub fn init_batch<B: Backend>(
    bk: &B,
    batch: usize,
    depth: usize,
    dims: StackDims,
    initial: &B::Tensor,
) -> Result<BatchState<B>> {
    if batch == 0 || depth == 0 || dims.layers == 0 || dims.hidden == 0 || dims.emb == 0 {
        return Err(Error::Config(format!(
            "batch {batch}, depth {depth} and stack dims {dims:?} must all be positive"
        )));
    }
    let StackDims { layers, hidden, emb } = dims;
    let unit = bk.reshape(initial, &[1, layers, 2, hidden])?;
    let tiled = bk.select(&unit, &vec![0; batch], None)?;
    let zeros = bk.constant(Array::zeros(&[batch, depth + 1, layers, 2, hidden]));
    let s_h = bk.assign(zeros, &(0..batch).collect::<Vec<_>>(), Some(&vec![0; batch]), &tiled)?;
    let s_e = bk.constant(Array::zeros(&[batch, depth + 1, emb]));
    Ok(BatchState {
        s_h,
        s_e,
        p_h: vec![0; batch],
        q: vec![0; batch * depth],
        p_q: vec![-1; batch],
        b: vec![0; batch],
        finished: vec![false; batch],
        batch,
        depth,
        slots: depth + 1,
        dims,
    })
}

/// Row indices of GEN, NT and REDUCE actions; PAD rows appear in none.
pub fn partition_actions(actions: &[Action]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut gen, mut nt, mut red) = (Vec::new(), Vec::new(), Vec::new());
    for (i, a) in actions.iter().enumerate() {
        match a {
            Action::Gen(_) => gen.push(i),
            Action::Nt(_) => nt.push(i),
            Action::Reduce => red.push(i),
            Action::Pad => {}
        }
    }
    (gen, nt, red)
}

/// Copies `S_e[rows[r], start[r]..=end[r]]` into a zero-padded `R×K×E`
/// tensor, left aligned, and returns the span lengths.
pub fn gather_children<B: Backend>(
    bk: &B,
    s_e: &B::Tensor,
    rows: &[usize],
    start: &[usize],
    end: &[usize],
) -> Result<(B::Tensor, Vec<usize>)> {
    let shape = bk.shape(s_e);
    let emb = *shape.last().ok_or_else(|| Error::Config("S_e must be rank 3".into()))?;
    let mut lengths = Vec::with_capacity(rows.len());
    let (mut src_r, mut src_c, mut dst_r, mut dst_c) = (vec![], vec![], vec![], vec![]);
    for (r, ((&row, &s), &e)) in rows.iter().zip(start).zip(end).enumerate() {
        if s > e {
            return Err(Error::State {
                row,
                msg: format!("inverted child span {s}..={e}"),
            });
        }
        lengths.push(e - s + 1);
        for k in 0..=e - s {
            src_r.push(row);
            src_c.push(s + k);
            dst_r.push(r);
            dst_c.push(k);
        }
    }
    let kmax = lengths.iter().copied().max().unwrap_or(0);
    let picked = bk.select(s_e, &src_r, Some(&src_c))?;
    let out = bk.constant(Array::zeros(&[rows.len(), kmax, emb]));
    let out = bk.assign(out, &dst_r, Some(&dst_c), &picked)?;
    Ok((out, lengths))
}

/// Takes a tensor out of a state field so eager execution can write into
/// it without copying.
fn take<B: Backend>(bk: &B, slot: &mut B::Tensor) -> B::Tensor {
    std::mem::replace(slot, bk.constant(Array::zeros(&[0])))
}

impl<B: Backend> BatchState<B> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> StackDims {
        self.dims
    }

    /// Number of open nonterminals in row `i`.
    pub fn open_nts(&self, i: usize) -> usize {
        (self.p_q[i] + 1) as usize
    }

    /// Slot of the innermost open nonterminal of row `i`.
    pub fn last_open(&self, i: usize) -> Option<usize> {
        usize::try_from(self.p_q[i]).ok().map(|d| self.q[i * self.depth + d])
    }

    /// `n×H` last-layer hidden state at the stack top of each of `rows`.
    pub fn top_hidden(&self, bk: &B, rows: &[usize]) -> Result<B::Tensor> {
        let StackDims { layers, hidden, .. } = self.dims;
        let cols: Vec<usize> = rows.iter().map(|&r| self.p_h[r]).collect();
        let top = bk.select(&self.s_h, rows, Some(&cols))?;
        let flat = bk.reshape(&top, &[rows.len(), layers * 2 * hidden])?;
        let off = (layers - 1) * 2 * hidden;
        Ok(bk.slice(&flat, off, off + hidden)?)
    }

    /// Allocated extent of the slot axis.
    pub fn slots(&self) -> usize {
        self.slots
    }

    fn trimmed_slots(&self, highest: usize) -> usize {
        (highest + 1 + HEADROOM).min(self.depth + 1)
    }

    fn empty_tensors(bk: &B, rows: usize, slots: usize, dims: StackDims) -> (B::Tensor, B::Tensor) {
        let StackDims { layers, hidden, emb } = dims;
        (
            bk.constant(Array::zeros(&[rows, slots, layers, 2, hidden])),
            bk.constant(Array::zeros(&[rows, slots, emb])),
        )
    }

    /// New state made of the given rows, duplicates allowed. Only the live
    /// slots of each row are copied.
    pub fn gather_rows(&self, bk: &B, rows: &[usize]) -> Result<Self> {
        let pick = |v: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let d = self.depth;
        let slots = self.trimmed_slots(rows.iter().map(|&r| self.p_h[r]).max().unwrap_or(0));
        let (s_h, s_e) = Self::empty_tensors(bk, rows.len(), slots, self.dims);
        Ok(Self {
            s_h: copy_live(bk, &self.s_h, s_h, rows, &self.p_h, 0)?,
            s_e: copy_live(bk, &self.s_e, s_e, rows, &self.p_h, 0)?,
            p_h: pick(&self.p_h),
            q: rows.iter().flat_map(|&r| self.q[r * d..(r + 1) * d].iter().copied()).collect(),
            p_q: rows.iter().map(|&r| self.p_q[r]).collect(),
            b: pick(&self.b),
            finished: rows.iter().map(|&r| self.finished[r]).collect(),
            batch: rows.len(),
            depth: d,
            slots,
            dims: self.dims,
        })
    }

    /// Reallocates every row with `slots` slots, keeping the live ones.
    fn resize(&mut self, bk: &B, slots: usize, p_h: &[usize]) -> Result<()> {
        let rows: Vec<usize> = (0..self.batch).collect();
        let (s_h, s_e) = Self::empty_tensors(bk, self.batch, slots, self.dims);
        self.s_h = copy_live(bk, &self.s_h, s_h, &rows, p_h, 0)?;
        self.s_e = copy_live(bk, &self.s_e, s_e, &rows, p_h, 0)?;
        self.slots = slots;
        Ok(())
    }

    /// Stacks selected rows of several states (same depth and dims) into
    /// one state.
    pub fn concat(bk: &B, parts: &[(&Self, &[usize])]) -> Result<Self> {
        let (first, _) = parts.first().ok_or(Error::Empty("state list"))?;
        let (depth, dims) = (first.depth, first.dims);
        let total: usize = parts.iter().map(|(_, r)| r.len()).sum();
        if total == 0 {
            return Err(Error::Empty("row selection"));
        }
        let highest = parts.iter().flat_map(|(st, rows)| rows.iter().map(|&r| st.p_h[r])).max().unwrap_or(0);
        let slots = first.trimmed_slots(highest);
        let (mut s_h, mut s_e) = Self::empty_tensors(bk, total, slots, dims);
        let mut out = Self {
            s_h: bk.constant(Array::zeros(&[0])),
            s_e: bk.constant(Array::zeros(&[0])),
            p_h: Vec::with_capacity(total),
            q: Vec::with_capacity(total * depth),
            p_q: Vec::with_capacity(total),
            b: Vec::with_capacity(total),
            finished: Vec::with_capacity(total),
            batch: total,
            depth,
            slots,
            dims,
        };
        let mut offset = 0;
        for (st, rows) in parts {
            if st.depth != depth || st.dims != dims {
                return Err(Error::Config("cannot concatenate states of different shapes".into()));
            }
            if rows.is_empty() {
                continue;
            }
            s_h = copy_live(bk, &st.s_h, s_h, rows, &st.p_h, offset)?;
            s_e = copy_live(bk, &st.s_e, s_e, rows, &st.p_h, offset)?;
            for &r in rows.iter() {
                out.p_h.push(st.p_h[r]);
                out.q.extend_from_slice(&st.q[r * depth..(r + 1) * depth]);
                out.p_q.push(st.p_q[r]);
                out.b.push(st.b[r]);
                out.finished.push(st.finished[r]);
            }
            offset += rows.len();
        }
        out.s_h = s_h;
        out.s_e = s_e;
        Ok(out)
    }

    /// Checks the pointer invariants of every row.
    pub fn validate(&self, lens: Option<&[usize]>) -> Result<()> {
        let d = self.depth;
        for i in 0..self.batch {
            let bad = |msg: String| Err(Error::State { row: i, msg });
            if self.p_h[i] > d {
                return bad(format!("p_h {} exceeds depth {d}", self.p_h[i]));
            }
            if self.p_h[i] >= self.slots {
                return bad(format!("p_h {} outside the {} allocated slots", self.p_h[i], self.slots));
            }
            if self.p_q[i] < -1 || self.p_q[i] >= d as isize {
                return bad(format!("p_q {} outside [-1, {d})", self.p_q[i]));
            }
            let mut prev = 0;
            for k in 0..self.open_nts(i) {
                let v = self.q[i * d + k];
                if v <= prev || v > self.p_h[i] {
                    return bad(format!("q[{k}] = {v} breaks 0 < q increasing <= p_h = {}", self.p_h[i]));
                }
                prev = v;
            }
            if let Some(lens) = lens {
                if self.b[i] > lens[i] {
                    return bad(format!("cursor {} beyond sentence length {}", self.b[i], lens[i]));
                }
            }
            if self.finished[i] && self.p_q[i] != -1 {
                return bad("finished row still has open nonterminals".into());
            }
        }
        Ok(())
    }
}

/// Legality mask, row-major `B×(n_nt+2)`, in action-index order.
pub fn valid_actions<B: Backend>(st: &BatchState<B>, lens: &[usize], max_open_nt: usize, n_nt: usize) -> Vec<bool> {
    let width = n_nt + 2;
    let mut mask = vec![false; st.batch * width];
    for i in 0..st.batch {
        if st.finished[i] {
            continue;
        }
        let row = &mut mask[i * width..(i + 1) * width];
        let words_left = st.b[i] < lens[i];
        let open = st.open_nts(i);
        if words_left && open < max_open_nt && st.p_h[i] + 1 < st.depth {
            row[..n_nt].iter_mut().for_each(|m| *m = true);
        }
        if words_left && open > 0 && st.p_h[i] < st.depth {
            row[n_nt] = true;
        }
        if let Some(last) = st.last_open(i) {
            row[n_nt + 1] = last != st.p_h[i] && (open > 1 || !words_left);
        }
    }
    mask
}

/// Exact liveness test for inference: whether a stack can still generate
/// its remaining tokens and close under the depth bound and the limit on
/// open nonterminals. [`valid_actions`] alone lets a row walk into a
/// configuration with no way out (a flat constituent that reaches the
/// bound with tokens left), which beam search must avoid.
#[derive(Clone, Debug)]
pub struct Reach {
    depth: usize,
    max_open: usize,
    /// `cap[s][k]`: most tokens that fit in slots `s..=D` when `k` more
    /// nonterminals may be open at once, saturating.
    cap: Vec<Vec<u64>>,
}

impl Reach {
    pub fn new(depth: usize, max_open: usize) -> Self {
        let kmax = max_open.min(depth);
        let mut cap = vec![vec![0u64; kmax + 1]; depth + 2];
        for s in (1..=depth).rev() {
            for k in 0..=kmax {
                // A slot holds one token, or a constituent opened there.
                let nested = if k > 0 && s < depth { cap[s + 1][k - 1] } else { 0 };
                cap[s][k] = nested.max(1).saturating_add(cap[s + 1][k]);
            }
        }
        Self { depth, max_open, cap }
    }

    fn room(&self, slot: usize, open: usize) -> u64 {
        let k = self.max_open.saturating_sub(open).min(self.cap[0].len() - 1);
        self.cap.get(slot).map_or(0, |row| row[k])
    }

    /// Whether a stack of height `height` whose open nonterminals sit at
    /// slots `markers` can absorb exactly `remaining` more tokens and close.
    pub fn feasible(&self, height: usize, markers: &[usize], remaining: usize) -> bool {
        let o = markers.len();
        if o == 0 {
            // Before the root is opened, or after it has closed.
            return if height == 0 {
                remaining >= 1 && self.depth >= 2 && self.room(2, 1) >= remaining as u64
            } else {
                remaining == 0
            };
        }
        let top_empty = markers[o - 1] == height;
        if remaining == 0 {
            return !top_empty;
        }
        let mut total = self.room(height + 1, o);
        for (i, &m) in markers.iter().enumerate().skip(1) {
            total = total.saturating_add(self.room(m + 1, i));
        }
        total >= remaining as u64
    }

    /// Clears the entries of `mask` (as produced by [`valid_actions`]) whose
    /// successor state is not [`feasible`](Self::feasible).
    pub fn prune<B: Backend>(&self, st: &BatchState<B>, lens: &[usize], n_nt: usize, mask: &mut [bool]) {
        let width = n_nt + 2;
        let mut markers = Vec::new();
        for i in 0..st.batch {
            let row = &mut mask[i * width..(i + 1) * width];
            if !row.iter().any(|&m| m) {
                continue;
            }
            let open = st.open_nts(i);
            let (h, left) = (st.p_h[i], lens[i] - st.b[i]);
            let q = &st.q[i * st.depth..i * st.depth + open];
            if row[0] {
                markers.clear();
                markers.extend_from_slice(q);
                markers.push(h + 1);
                if !self.feasible(h + 1, &markers, left) {
                    row[..n_nt].iter_mut().for_each(|m| *m = false);
                }
            }
            if row[n_nt] && !self.feasible(h + 1, q, left - 1) {
                row[n_nt] = false;
            }
            if row[n_nt + 1] && !self.feasible(q[open - 1], &q[..open - 1], left) {
                row[n_nt + 1] = false;
            }
        }
    }
}

fn check_row<B: Backend>(st: &BatchState<B>, i: usize, a: &Action, len: usize) -> Result<()> {
    let illegal = |msg: &str| {
        Err(Error::IllegalAction {
            row: i,
            action: a.to_string(),
            msg: msg.to_string(),
        })
    };
    if st.finished[i] {
        return illegal("row already finished");
    }
    match a {
        Action::Nt(_) | Action::Gen(_) if st.p_h[i] + 1 > st.depth => Err(Error::DepthOverflow {
            row: i,
            needed: st.p_h[i] + 1,
            bound: st.depth,
        }),
        Action::Nt(_) if st.open_nts(i) >= st.depth => illegal("open nonterminal table is full"),
        Action::Gen(_) if st.b[i] >= len => illegal("no tokens left"),
        Action::Gen(_) if st.p_q[i] < 0 => illegal("no open nonterminal"),
        Action::Reduce => match st.last_open(i) {
            None => illegal("no open nonterminal"),
            Some(l) if l == st.p_h[i] => illegal("empty constituent"),
            Some(_) if st.p_q[i] == 0 && st.b[i] < len => illegal("root closed before the last token"),
            Some(_) => Ok(()),
        },
        _ => Ok(()),
    }
}

/// One step of the batched machine. `tokens[i]` is row `i`'s sentence; GEN
/// reads the token under the cursor.
pub fn apply_step<B: Backend, H: ModelHooks<B> + ?Sized>(
    bk: &B,
    st: &mut BatchState<B>,
    actions: &[Action],
    tokens: &[&[u32]],
    hooks: &H,
) -> Result<()> {
    if actions.len() != st.batch || tokens.len() != st.batch {
        return Err(Error::Config(format!(
            "batch of {} rows got {} actions and {} sentences",
            st.batch,
            actions.len(),
            tokens.len()
        )));
    }
    for (i, a) in actions.iter().enumerate() {
        if !a.is_pad() {
            check_row(st, i, a, tokens[i].len())?;
        }
    }
    let (i_gen, i_nt, i_red) = partition_actions(actions);
    let d = st.depth;
    let emb = st.dims.emb;

    let mut e_next = bk.constant(Array::zeros(&[st.batch, emb]));
    if !i_gen.is_empty() {
        let toks: Vec<u32> = i_gen.iter().map(|&r| tokens[r][st.b[r]]).collect();
        e_next = bk.assign(e_next, &i_gen, None, &hooks.word_emb(bk, &toks)?)?;
        i_gen.iter().for_each(|&r| st.b[r] += 1);
    }
    if !i_nt.is_empty() {
        let nts: Vec<u32> = i_nt
            .iter()
            .map(|&r| match actions[r] {
                Action::Nt(x) => x,
                _ => unreachable!(),
            })
            .collect();
        e_next = bk.assign(e_next, &i_nt, None, &hooks.nt_emb(bk, &nts)?)?;
        for &r in &i_nt {
            st.p_q[r] += 1;
            st.q[r * d + st.p_q[r] as usize] = st.p_h[r] + 1;
        }
    }
    if !i_red.is_empty() {
        let prev_nt: Vec<usize> = i_red.iter().map(|&r| st.q[r * d + st.p_q[r] as usize]).collect();
        let ends: Vec<usize> = i_red.iter().map(|&r| st.p_h[r]).collect();
        let (children, lengths) = gather_children(bk, &st.s_e, &i_red, &prev_nt, &ends)?;
        e_next = bk.assign(e_next, &i_red, None, &hooks.compose(bk, &children, &lengths)?)?;
        for (&r, &p) in i_red.iter().zip(&prev_nt) {
            st.p_q[r] -= 1;
            st.p_h[r] = p - 1;
            if st.p_q[r] < 0 {
                st.finished[r] = true;
            }
        }
    }

    let mut active: Vec<usize> = (0..st.batch).filter(|&i| !actions[i].is_pad()).collect();
    active.sort_unstable();
    if active.is_empty() {
        return Ok(());
    }
    let highest = active.iter().map(|&r| st.p_h[r] + 1).max().unwrap_or(0);
    if highest >= st.slots {
        // Rows that reduced already point below their old top; copy up to
        // the slot each row will read from.
        let live: Vec<usize> = (0..st.batch).map(|r| st.p_h[r].min(st.slots - 1)).collect();
        let grown = (highest + 1 + HEADROOM).min(d + 1);
        st.resize(bk, grown, &live)?;
    }
    active.iter().for_each(|&r| st.p_h[r] += 1);
    let below: Vec<usize> = active.iter().map(|&r| st.p_h[r] - 1).collect();
    let top: Vec<usize> = active.iter().map(|&r| st.p_h[r]).collect();
    let prev = bk.select(&st.s_h, &active, Some(&below))?;
    let input = bk.select(&e_next, &active, None)?;
    let new_h = hooks.recur(bk, &prev, &input)?;
    let s_h = take(bk, &mut st.s_h);
    st.s_h = bk.assign(s_h, &active, Some(&top), &new_h)?;
    let s_e = take(bk, &mut st.s_e);
    st.s_e = bk.assign(s_e, &active, Some(&top), &input)?;
    Ok(())
}
