//! Deterministic discrete-event scheduler over real threads.
//!
//! Every participating thread is an *actor*. Exactly one actor runs at a
//! time; the others are parked on a condition variable. When the running
//! actor blocks (receive on an empty mailbox, sleep, join) the scheduler
//! hands the baton to the oldest runnable actor, or, if none is runnable,
//! advances virtual time to the next pending event. Events fire in
//! `(time, sequence)` order, so identical programs produce identical
//! schedules.
//!
//! Lock order is scheduler state, then mailbox. Actors must not block in the
//! scheduler while holding any other lock.

use std::any::Any;
use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;

static NEXT_SIM_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // (sim id, actor id) pairs. A spawned actor thread holds one entry; a
    // thread that created several simulations is actor 0 of each.
    static CURRENT: RefCell<Vec<(u64, usize)>> = const { RefCell::new(Vec::new()) };
}

pub const NANOS_PER_SEC: f64 = 1e9;

pub fn secs_to_nanos(secs: f64) -> u64 {
    if secs <= 0.0 {
        0
    } else {
        (secs * NANOS_PER_SEC).round() as u64
    }
}

type Action = Box<dyn FnOnce(&mut State) + Send>;

enum EventKind {
    Wake { actor: usize, token: u64 },
    Run(Action),
}

struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Running,
    Runnable,
    Blocked,
    Finished,
}

struct Actor {
    name: String,
    status: Status,
    /// Bumped on every block; stale wake-ups carry an old token and are ignored.
    token: u64,
    joiners: Vec<(usize, u64)>,
    /// Set when the actor was released from a global deadlock.
    deadlock_woken: bool,
}

pub(crate) struct State {
    now: u64,
    seq: u64,
    events: BinaryHeap<Reverse<Event>>,
    actors: Vec<Actor>,
    runnable: VecDeque<usize>,
    current: Option<usize>,
}

impl State {
    fn push_event(&mut self, time: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Reverse(Event { time, seq, kind }));
    }

    fn wake(&mut self, actor: usize, token: u64) {
        let a = &mut self.actors[actor];
        if a.status == Status::Blocked && a.token == token {
            a.status = Status::Runnable;
            self.runnable.push_back(actor);
        }
    }

    fn prepare_block(&mut self, actor: usize) -> u64 {
        let a = &mut self.actors[actor];
        a.token += 1;
        a.token
    }

    /// Picks the next actor to run, firing events as needed.
    fn schedule(&mut self) {
        loop {
            if let Some(next) = self.runnable.pop_front() {
                self.actors[next].status = Status::Running;
                self.current = Some(next);
                return;
            }
            if let Some(Reverse(ev)) = self.events.pop() {
                debug_assert!(ev.time >= self.now);
                self.now = self.now.max(ev.time);
                match ev.kind {
                    EventKind::Wake { actor, token } => self.wake(actor, token),
                    EventKind::Run(action) => action(self),
                }
                continue;
            }
            // Nothing can ever happen again: release every blocked actor so
            // it can observe the deadlock instead of hanging.
            let blocked: Vec<usize> = (0..self.actors.len())
                .filter(|i| self.actors[*i].status == Status::Blocked)
                .collect();
            if blocked.is_empty() {
                self.current = None;
                return;
            }
            for i in blocked {
                log::debug!("sim deadlock releases actor {}", self.actors[i].name);
                self.actors[i].deadlock_woken = true;
                self.actors[i].status = Status::Runnable;
                self.runnable.push_back(i);
            }
        }
    }
}

struct Inner {
    id: u64,
    state: Mutex<State>,
    cv: Condvar,
}

impl Drop for Inner {
    fn drop(&mut self) {
        let id = self.id;
        let _ = CURRENT.try_with(|c| c.borrow_mut().retain(|(sim, _)| *sim != id));
    }
}

/// Handle to a virtual-time simulation. Cloning shares the simulation.
#[derive(Clone)]
pub struct Sim {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Sim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sim").field("id", &self.inner.id).finish()
    }
}

impl Sim {
    /// Creates a simulation whose first actor is the calling thread.
    pub fn new() -> Sim {
        let id = NEXT_SIM_ID.fetch_add(1, AtomicOrdering::Relaxed);
        let state = State {
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            actors: vec![Actor {
                name: "main".into(),
                status: Status::Running,
                token: 0,
                joiners: Vec::new(),
                deadlock_woken: false,
            }],
            runnable: VecDeque::new(),
            current: Some(0),
        };
        CURRENT.with(|c| c.borrow_mut().push((id, 0)));
        Sim {
            inner: Arc::new(Inner {
                id,
                state: Mutex::new(state),
                cv: Condvar::new(),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn me(&self) -> usize {
        let id = self.inner.id;
        CURRENT
            .with(|c| c.borrow().iter().find(|(sim, _)| *sim == id).map(|&(_, a)| a))
            .expect("thread is not an actor of this simulation")
    }

    pub fn now_nanos(&self) -> u64 {
        self.lock().now
    }

    pub fn now(&self) -> f64 {
        self.now_nanos() as f64 / NANOS_PER_SEC
    }

    /// Parks the calling actor until the scheduler selects it again.
    /// Returns true when the actor was released by deadlock detection.
    fn block<'a>(&'a self, mut st: MutexGuard<'a, State>, me: usize) -> (MutexGuard<'a, State>, bool) {
        st.actors[me].status = Status::Blocked;
        st.schedule();
        self.inner.cv.notify_all();
        while st.current != Some(me) {
            st = self.inner.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        let dl = std::mem::take(&mut st.actors[me].deadlock_woken);
        (st, dl)
    }

    pub fn sleep_until_nanos(&self, at: u64) {
        let me = self.me();
        let mut st = self.lock();
        while st.now < at {
            let token = st.prepare_block(me);
            st.push_event(at, EventKind::Wake { actor: me, token });
            st = self.block(st, me).0;
        }
    }

    pub fn sleep(&self, secs: f64) {
        let at = self.now_nanos() + secs_to_nanos(secs);
        self.sleep_until_nanos(at);
    }

    /// Lets every other runnable actor, and every event due now, run first.
    pub fn yield_now(&self) {
        let me = self.me();
        let mut st = self.lock();
        let token = st.prepare_block(me);
        let now = st.now;
        st.push_event(now, EventKind::Wake { actor: me, token });
        drop(self.block(st, me));
    }

    /// Schedules `action` to run inside the scheduler at virtual time `at`.
    pub(crate) fn at(&self, at: u64, action: impl FnOnce(&mut State) + Send + 'static) {
        let mut st = self.lock();
        let at = at.max(st.now);
        st.push_event(at, EventKind::Run(Box::new(action)));
    }

    pub fn spawn<T, F>(&self, name: &str, f: F) -> SimJoin<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let id = {
            let mut st = self.lock();
            st.actors.push(Actor {
                name: name.to_string(),
                status: Status::Runnable,
                token: 0,
                joiners: Vec::new(),
                deadlock_woken: false,
            });
            let id = st.actors.len() - 1;
            st.runnable.push_back(id);
            id
        };
        let slot: Arc<Mutex<Option<thread::Result<T>>>> = Arc::new(Mutex::new(None));
        let sim = self.clone();
        let out = slot.clone();
        let handle = thread::Builder::new()
            .name(format!("sim-{name}"))
            .spawn(move || {
                CURRENT.with(|c| c.borrow_mut().push((sim.inner.id, id)));
                {
                    let mut st = sim.lock();
                    while st.current != Some(id) {
                        st = sim.inner.cv.wait(st).unwrap_or_else(|e| e.into_inner());
                    }
                }
                let result = panic::catch_unwind(AssertUnwindSafe(f));
                *out.lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
                let mut st = sim.lock();
                st.actors[id].status = Status::Finished;
                for (j, token) in std::mem::take(&mut st.actors[id].joiners) {
                    st.wake(j, token);
                }
                st.schedule();
                sim.inner.cv.notify_all();
            })
            .expect("spawn simulation actor");
        SimJoin {
            sim: self.clone(),
            id,
            slot,
            handle: Some(handle),
        }
    }

    pub fn mailbox<T: Send + 'static>(&self) -> (SimTx<T>, SimRx<T>) {
        let mb = Arc::new(Mailbox {
            sim: self.clone(),
            q: Mutex::new(MailboxState {
                items: VecDeque::new(),
                waiter: None,
                senders: 1,
                inflight: 0,
                receiver_alive: true,
            }),
        });
        (SimTx { mb: mb.clone() }, SimRx { mb })
    }
}

impl Default for Sim {
    fn default() -> Self {
        Sim::new()
    }
}

pub struct SimJoin<T> {
    sim: Sim,
    id: usize,
    slot: Arc<Mutex<Option<thread::Result<T>>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl<T> SimJoin<T> {
    /// Blocks the calling actor until the spawned actor finishes, then
    /// returns its result, re-raising its panic if it panicked.
    pub fn join(mut self) -> T {
        let me = self.sim.me();
        let mut st = self.sim.lock();
        while st.actors[self.id].status != Status::Finished {
            let token = st.prepare_block(me);
            st.actors[self.id].joiners.push((me, token));
            let (s, deadlocked) = self.sim.block(st, me);
            st = s;
            if deadlocked && st.actors[self.id].status != Status::Finished {
                let name = st.actors[self.id].name.clone();
                drop(st);
                panic!("simulation deadlock while joining actor {name}");
            }
        }
        drop(st);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        let result = self
            .slot
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take()
            .expect("finished actor stored its result");
        match result {
            Ok(v) => v,
            Err(p) => panic::resume_unwind(p as Box<dyn Any + Send>),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.sim.lock().actors[self.id].status == Status::Finished
    }
}

struct MailboxState<T> {
    items: VecDeque<T>,
    waiter: Option<(usize, u64)>,
    senders: usize,
    /// Deliveries scheduled for the future; the mailbox is not disconnected
    /// until they have landed.
    inflight: usize,
    receiver_alive: bool,
}

struct Mailbox<T> {
    sim: Sim,
    q: Mutex<MailboxState<T>>,
}

impl<T> Mailbox<T> {
    fn lock(&self) -> MutexGuard<'_, MailboxState<T>> {
        self.q.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecvError {
    Timeout,
    Disconnected,
}

pub struct SimTx<T: Send + 'static> {
    mb: Arc<Mailbox<T>>,
}

impl<T: Send + 'static> SimTx<T> {
    /// Delivers immediately. Fails when the receiver is gone.
    pub fn send(&self, item: T) -> Result<(), T> {
        let mut st = self.mb.sim.lock();
        let mut q = self.mb.lock();
        if !q.receiver_alive {
            return Err(item);
        }
        q.items.push_back(item);
        if let Some((a, t)) = q.waiter.take() {
            st.wake(a, t);
        }
        Ok(())
    }

    /// Delivers at virtual time `at` (nanoseconds).
    pub fn send_at(&self, item: T, at: u64) {
        let mb = self.mb.clone();
        self.mb.lock().inflight += 1;
        self.mb.sim.at(at, move |st| {
            let mut q = mb.lock();
            q.inflight -= 1;
            if q.receiver_alive {
                q.items.push_back(item);
            }
            if let Some((a, t)) = q.waiter.take() {
                st.wake(a, t);
            }
        });
    }
}

impl<T: Send + 'static> Clone for SimTx<T> {
    fn clone(&self) -> Self {
        self.mb.lock().senders += 1;
        SimTx { mb: self.mb.clone() }
    }
}

impl<T: Send + 'static> Drop for SimTx<T> {
    fn drop(&mut self) {
        let mut st = self.mb.sim.lock();
        let mut q = self.mb.lock();
        q.senders -= 1;
        if q.senders == 0 {
            if let Some((a, t)) = q.waiter.take() {
                st.wake(a, t);
            }
        }
    }
}

pub struct SimRx<T: Send + 'static> {
    mb: Arc<Mailbox<T>>,
}

impl<T: Send + 'static> SimRx<T> {
    /// Receives, waiting until virtual time `deadline` (nanoseconds) at most.
    pub fn recv_deadline(&self, deadline: Option<u64>) -> Result<T, RecvError> {
        let sim = &self.mb.sim;
        let me = sim.me();
        let mut st = sim.lock();
        loop {
            let mut q = self.mb.lock();
            if let Some(item) = q.items.pop_front() {
                return Ok(item);
            }
            if q.senders == 0 && q.inflight == 0 {
                return Err(RecvError::Disconnected);
            }
            if let Some(d) = deadline {
                if st.now >= d {
                    return Err(RecvError::Timeout);
                }
            }
            let token = st.prepare_block(me);
            q.waiter = Some((me, token));
            drop(q);
            if let Some(d) = deadline {
                st.push_event(d, EventKind::Wake { actor: me, token });
            }
            let (s, deadlocked) = sim.block(st, me);
            st = s;
            if deadlocked {
                let mut q = self.mb.lock();
                q.waiter = None;
                return match q.items.pop_front() {
                    Some(item) => Ok(item),
                    None => Err(RecvError::Disconnected),
                };
            }
        }
    }

    pub fn recv(&self) -> Result<T, RecvError> {
        self.recv_deadline(None)
    }

    pub fn recv_timeout(&self, secs: f64) -> Result<T, RecvError> {
        let deadline = self.mb.sim.now_nanos() + secs_to_nanos(secs);
        self.recv_deadline(Some(deadline))
    }

    pub fn try_recv(&self) -> Option<T> {
        self.mb.lock().items.pop_front()
    }
}

impl<T: Send + 'static> Drop for SimRx<T> {
    fn drop(&mut self) {
        let dropped = {
            let mut q = self.mb.lock();
            q.receiver_alive = false;
            q.waiter = None;
            std::mem::take(&mut q.items)
        };
        drop(dropped);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sleep_advances_virtual_time() {
        let sim = Sim::new();
        assert_eq!(sim.now_nanos(), 0);
        sim.sleep(1.5);
        assert_eq!(sim.now_nanos(), 1_500_000_000);
    }

    #[test]
    fn delayed_delivery_and_timeout() {
        let sim = Sim::new();
        let (tx, rx) = sim.mailbox::<u32>();
        tx.send_at(7, 2_000);
        assert_eq!(rx.recv_deadline(Some(1_000)), Err(RecvError::Timeout));
        assert_eq!(sim.now_nanos(), 1_000);
        assert_eq!(rx.recv(), Ok(7));
        assert_eq!(sim.now_nanos(), 2_000);
        drop(tx);
        assert_eq!(rx.recv(), Err(RecvError::Disconnected));
    }

    #[test]
    fn actors_interleave_deterministically() {
        fn run() -> Vec<(u64, &'static str)> {
            let sim = Sim::new();
            let log = Arc::new(Mutex::new(Vec::new()));
            let mut joins = Vec::new();
            for (name, period) in [("a", 3u64), ("b", 5u64)] {
                let s = sim.clone();
                let l = log.clone();
                joins.push(sim.spawn(name, move || {
                    for _ in 0..4 {
                        s.sleep_until_nanos(s.now_nanos() + period);
                        l.lock().unwrap().push((s.now_nanos(), name));
                    }
                }));
            }
            for j in joins {
                j.join();
            }
            let out = log.lock().unwrap().clone();
            out
        }
        let first = run();
        assert_eq!(
            first,
            vec![(3, "a"), (5, "b"), (6, "a"), (9, "a"), (10, "b"), (12, "a"), (15, "b"), (20, "b")]
        );
        for _ in 0..5 {
            assert_eq!(run(), first);
        }
    }

    #[test]
    fn ping_pong_between_actors() {
        let sim = Sim::new();
        let (to_b, b_rx) = sim.mailbox::<u64>();
        let (to_a, a_rx) = sim.mailbox::<u64>();
        let s = sim.clone();
        let b = sim.spawn("b", move || {
            let mut n = 0;
            while let Ok(v) = b_rx.recv() {
                to_a.send_at(v + 1, s.now_nanos() + 10);
                n += 1;
            }
            n
        });
        let mut v = 0;
        for _ in 0..5 {
            to_b.send_at(v, sim.now_nanos() + 10);
            v = a_rx.recv().unwrap();
        }
        drop(to_b);
        assert_eq!(b.join(), 5);
        assert_eq!(v, 5);
        assert_eq!(sim.now_nanos(), 100);
    }

    #[test]
    fn deadlock_releases_receiver() {
        let sim = Sim::new();
        let (_tx, rx) = sim.mailbox::<u8>();
        assert_eq!(rx.recv(), Err(RecvError::Disconnected));
    }

    #[test]
    fn panics_propagate_through_join() {
        let sim = Sim::new();
        let j = sim.spawn("boom", || -> u8 { panic!("boom") });
        let r = panic::catch_unwind(AssertUnwindSafe(|| j.join()));
        assert!(r.is_err());
        // the simulation is still usable afterwards
        sim.sleep(1.0);
        assert_eq!(sim.now(), 1.0);
    }
}
