//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use appnet::model::{AppId, RealEndpoint};
use appnet::names::{RCODE_NOERROR, RCODE_NXDOMAIN};
use appnet::node::control::{request, ControlRequest};
use appnet::node::daemon::spawn;
use appnet::node::NodeConfig;
use appnet::service_table::ServiceEntry;
use appnet::simharness::{bench, run_script, script, Cluster, StartOpts};
use appnet::switch::select::SelectionMode;
use appnet::trap::channel::UnixTransport;
use appnet::trap::generator::Generator;
use appnet::trap::wire::HandleKind;
use common::sim::*;
use common::{merge, oracle};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Reply-scan totals gathered from every simulated run, for criterion 5.
#[derive(Default)]
struct Scans {
    runs: Vec<(String, u64, u64, usize)>,
}

impl Scans {
    fn record(&mut self, what: &str, c: &Cluster) {
        self.runs.push((
            what.to_string(),
            c.scan.replies,
            c.scan.with_addr,
            c.scan.violations.len(),
        ));
    }
}

fn scenario(name: &str) -> &'static str {
    match name {
        "three_tier" => include_str!("../scenarios/three_tier.sim"),
        "converge16" => include_str!("../scenarios/converge16.sim"),
        "failover" => include_str!("../scenarios/failover.sim"),
        "partition" => include_str!("../scenarios/partition.sim"),
        "datagram" => include_str!("../scenarios/datagram.sim"),
        _ => unreachable!(),
    }
}

fn c1_figure_one(scans: &mut Scans) -> Outcome {
    let run = run_script(&script::parse(scenario("three_tier")).map_err(|e| e.to_string())?);
    scans.record("three_tier", &run.cluster);
    run.result.as_ref().map_err(|e| e.to_string())?;
    ensure!(run.simulated_ms() < 5000, "{} ms simulated", run.simulated_ms());

    // Read the outcomes back from the trace rather than trusting the script.
    let mut outcomes = Vec::new();
    let mut raw = Vec::new();
    for l in run.cluster.trace.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        match v["ev"].as_str() {
            Some("connect") => outcomes.push((
                v["app"].as_str().unwrap().to_string(),
                v["dest"].as_str().unwrap().to_string(),
                v["result"].as_str().unwrap().to_string(),
                v["server"].as_str().map(str::to_string),
            )),
            Some("rawconnect") => raw.push(v["delivered"].as_u64().unwrap()),
            _ => {}
        }
    }
    let want = [
        ("web1", "10.0.0.10:8080", "ok"),
        ("web1", "10.0.0.10:8080", "ok"),
        ("web2", "10.0.0.10:8080", "ok"),
        ("app1", "10.0.0.10:5432", "ok"),
        ("app2", "10.0.0.10:5432", "ok"),
        ("web1", "10.0.0.10:5432", "Denied"),
        ("web2", "10.0.0.10:5432", "Denied"),
    ];
    ensure!(outcomes.len() == want.len(), "{} connects", outcomes.len());
    for ((app, dest, res, _), (wa, wd, wr)) in outcomes.iter().zip(want) {
        ensure!(
            (app.as_str(), dest.as_str(), res.as_str()) == (wa, wd, wr),
            "{app} -> {dest}: {res}, expected {wr}"
        );
    }
    let app_servers: std::collections::BTreeSet<_> = outcomes[..3]
        .iter()
        .filter_map(|o| o.3.clone())
        .collect();
    ensure!(
        app_servers == ["app1", "app2"].iter().map(|s| s.to_string()).collect(),
        "App instances reached: {app_servers:?}"
    );
    ensure!(raw.len() == 3 && raw.iter().all(|&d| d == 0), "unmanaged deliveries {raw:?}");
    Ok(format!(
        "Web->App allow (app1+app2), App->DB allow, Web->DB deny, unmanaged 0/3 delivered, {} ms simulated",
        run.simulated_ms()
    ))
}

/// Two instances on h2 and h3, `clients` anonymous clients on h1, one
/// connect each. Returns the serving instance per client.
fn spread(seed: u64, clients: u32, scans: &mut Scans) -> Result<(Vec<String>, Vec<String>), String> {
    let mut c = cluster(3, seed, 0.0, SelectionMode::Rendezvous);
    c.add("i2", "h2", &["--name", "lb", "--ip", "10.30.0.1"]).unwrap();
    c.add("i3", "h3", &["--name", "lb", "--ip", "10.30.0.1"]).unwrap();
    let addr = c.listen("i2", 80).unwrap();
    c.listen("i3", 80).unwrap();
    steps_until(&mut c, 30, |c| everyone_has(c, addr, 2)).ok_or("entries never spread")?;
    let table = c.node("h1").unwrap().table.clone();
    let cands: Vec<&ServiceEntry> = table.lookup(&key(addr));
    let seed_cfg = c.node("h1").unwrap().config().strategy.seed;
    let h2 = c.host_id("h2").unwrap();
    let label_of = |e: &ServiceEntry| {
        if e.host == h2 {
            "i2".to_string()
        } else {
            "i3".to_string()
        }
    };
    let mut predicted = Vec::new();
    let mut got = Vec::new();
    let mut ids: Vec<AppId> = Vec::new();
    for i in 0..clients {
        let label = format!("c{i}");
        let ident = c.add(&label, "h1", &[] as &[&str]).unwrap();
        ids.push(ident.app_id);
        predicted.push(label_of(cands[oracle::winner(&ident.app_id, &key(addr), &cands, seed_cfg)]));
    }
    for i in 0..clients {
        let server = c.connect(&format!("c{i}"), addr).unwrap().map_err(|s| format!("{s:?}"))?;
        got.push(server.ok_or("connection not accepted")?);
    }
    let distinct: std::collections::BTreeSet<_> = ids.iter().collect();
    ensure!(distinct.len() == clients as usize, "client ids not distinct");
    scans.record("rendezvous", &c);
    Ok((got, predicted))
}

fn c2_load_balancing(scans: &mut Scans) -> Outcome {
    let (got, predicted) = spread(21, 1000, scans)?;
    ensure!(got == predicted, "selection differs from the recomputed hash");
    let n2 = got.iter().filter(|s| *s == "i2").count();
    let n3 = got.len() - n2;
    ensure!(n2 >= 300 && n3 >= 300, "split {n2}/{n3}");
    let (again, _) = spread(21, 1000, scans)?;
    ensure!(again == got, "not deterministic under a fixed seed");

    let mut c = cluster(3, 22, 0.0, SelectionMode::RoundRobin);
    c.add("i2", "h2", &["--name", "rr", "--ip", "10.31.0.1"]).unwrap();
    c.add("i3", "h3", &["--name", "rr", "--ip", "10.31.0.1"]).unwrap();
    let addr = c.listen("i2", 80).unwrap();
    c.listen("i3", 80).unwrap();
    c.add("client", "h1", &[] as &[&str]).unwrap();
    steps_until(&mut c, 30, |c| everyone_has(c, addr, 2)).ok_or("entries never spread")?;
    let seq: Vec<String> = (0..20)
        .map(|_| c.connect("client", addr).unwrap().unwrap().unwrap())
        .collect();
    ensure!(
        seq.windows(2).all(|w| w[0] != w[1]) && seq.iter().any(|s| s == "i2") && seq.iter().any(|s| s == "i3"),
        "round robin sequence {seq:?}"
    );
    scans.record("round_robin", &c);
    Ok(format!(
        "rendezvous 1000 clients: {n2}/{n3} ({:.1}%/{:.1}%), matches hash oracle, replay identical; round robin alternates over 20 connects",
        n2 as f64 / 10.0,
        n3 as f64 / 10.0
    ))
}

fn c3_convergence(scans: &mut Scans) -> Outcome {
    let mut report = Vec::new();
    for (loss, limit) in [(0.0, 10u64), (0.1, 20)] {
        let mut worst = 0;
        for seed in 0..10 {
            let mut c = cluster(16, 300 + seed, loss, SelectionMode::Rendezvous);
            steps_until(&mut c, 60, membership_settled).ok_or("membership never settled")?;
            c.add("new", "h11", &["--name", "fresh", "--ip", "10.32.0.1"]).unwrap();
            let addr = c.listen("new", 80).unwrap();
            let took = steps_until(&mut c, limit, |c| everyone_has(c, addr, 1))
                .ok_or(format!("loss {loss} seed {seed}: not everywhere by tick {limit}"))?;
            worst = worst.max(took);
            scans.record("convergence", &c);
        }
        report.push(format!("loss {loss}: worst {worst} ticks (limit {limit})"));
    }
    let run = run_script(&script::parse(scenario("converge16")).unwrap());
    scans.record("converge16", &run.cluster);
    run.result.map_err(|e| e.to_string())?;
    report.push("cold start script converged at tick 10".into());
    Ok(format!("16 nodes over 10 seeds each: {}", report.join("; ")))
}

fn c4_failover(scans: &mut Scans) -> Outcome {
    const N: usize = 5;
    const CLIENTS: usize = 20;
    let mut worst_tomb = 0;
    let mut early = (0usize, 0usize);
    for seed in 0..5 {
        let mut c = cluster(N, 400 + seed, 0.0, SelectionMode::Rendezvous);
        steps_until(&mut c, 60, membership_settled).ok_or("membership never settled")?;
        c.add("dead", "h2", &["--name", "fo", "--ip", "10.33.0.1"]).unwrap();
        c.add("live", "h3", &["--name", "fo", "--ip", "10.33.0.1"]).unwrap();
        let addr = c.listen("dead", 80).unwrap();
        c.listen("live", 80).unwrap();
        for i in 0..CLIENTS {
            c.add(&format!("c{i}"), "h1", &[] as &[&str]).unwrap();
        }
        steps_until(&mut c, 30, |c| everyone_has(c, addr, 2)).ok_or("entries never spread")?;
        let before: Vec<_> = (0..CLIENTS)
            .map(|i| c.connect(&format!("c{i}"), addr).unwrap().unwrap().unwrap())
            .collect();
        ensure!(before.iter().any(|s| s == "dead"), "seed {seed}: no client used the doomed instance");

        c.crash("h2").unwrap();
        let crash_at = c.round();
        let cfg = c.node("h1").unwrap().gossip.config().clone();
        let deadline = crash_at + cfg.suspect_timeout + 2;
        let bound = (N as u64 - 1) + 2 + cfg.suspect_timeout + cfg.anti_entropy_period;
        let mut tombstoned_at = None;
        while c.round() <= crash_at + bound {
            for i in 0..CLIENTS {
                let r = c.connect(&format!("c{i}"), addr).unwrap();
                let ok = matches!(&r, Ok(Some(s)) if s == "live");
                if c.round() < deadline {
                    early.0 += usize::from(ok);
                    early.1 += 1;
                } else {
                    ensure!(ok, "seed {seed} tick {}: connect gave {r:?}", c.round() - crash_at);
                }
            }
            if tombstoned_at.is_none() && everyone_has(&c, addr, 1) {
                tombstoned_at = Some(c.round() - crash_at);
            }
            c.step();
        }
        let t = tombstoned_at.ok_or(format!("seed {seed}: not tombstoned within {bound} ticks"))?;
        let id = c.identity("dead").unwrap().app_id;
        for h in up_hosts(&c) {
            ensure!(
                c.node(&h).unwrap().table.iter().filter(|e| e.app_id == id).all(|e| !e.is_alive()),
                "{h} still holds a live entry"
            );
        }
        worst_tomb = worst_tomb.max(t);
        scans.record("failover", &c);
    }
    let run = run_script(&script::parse(scenario("failover")).unwrap());
    scans.record("failover.sim", &run.cluster);
    run.result.map_err(|e| e.to_string())?;
    Ok(format!(
        "100% to survivor from T_suspect+2 on (and {}/{} before that); tombstoned everywhere within {worst_tomb} ticks",
        early.0, early.1
    ))
}

fn c5_identity(scans: &mut Scans) -> Outcome {
    for name in ["partition", "datagram"] {
        let run = run_script(&script::parse(scenario(name)).unwrap());
        scans.record(name, &run.cluster);
        run.result.map_err(|e| format!("{name}: {e}"))?;
    }
    let total: u64 = scans.runs.iter().map(|r| r.1).sum();
    let with_addr: u64 = scans.runs.iter().map(|r| r.2).sum();
    let bad: Vec<_> = scans.runs.iter().filter(|r| r.3 > 0).collect();
    ensure!(bad.is_empty(), "real endpoints leaked in {bad:?}");
    ensure!(with_addr > 0, "no address-carrying replies scanned");
    Ok(format!(
        "{} runs, {total} trap replies, {with_addr} carrying addresses, 0 real endpoints",
        scans.runs.len()
    ))
}

fn c6_dns(scans: &mut Scans) -> Outcome {
    let mut c = cluster(2, 600, 0.0, SelectionMode::Rendezvous);
    let ident = c.add("orders", "h2", &["--name", "orders"]).unwrap();
    c.listen("orders", 80).unwrap();
    c.add("client", "h1", &[] as &[&str]).unwrap();
    let vip = ident.effective_vip.addr();
    steps_until(&mut c, 30, |c| everyone_has(c, SocketAddrV4::new(vip, 80), 1)).ok_or("no spread")?;

    // The vip is the first probe of the name's FNV-1a hash in 240/8.
    let mut h = fnv::FnvHasher::default();
    h.write(b"orders");
    h.write(&0u32.to_be_bytes());
    let [_, x, y, z] = ((h.finish() & 0xff_ffff) as u32).to_be_bytes();
    ensure!(vip == Ipv4Addr::new(240, x, y, z), "vip {vip} not the hashed allocation");

    let a = c.dns("client", "orders").unwrap().ok_or("no DNS reply")?;
    ensure!(a.rcode == RCODE_NOERROR && a.authoritative, "{a:?}");
    ensure!(a.a == Some((vip, 1)), "answer {:?}", a.a);
    let served = c.connect("client", SocketAddrV4::new(vip, 80)).unwrap();
    ensure!(served == Ok(Some("orders".into())), "connect {served:?}");
    let nx = c.dns("client", "no-such-service").unwrap().ok_or("no DNS reply")?;
    ensure!(nx.rcode == RCODE_NXDOMAIN && nx.a.is_none(), "{nx:?}");
    scans.record("dns", &c);
    Ok(format!("orders -> {vip} ttl 1, connect reached it, unknown name NXDOMAIN"))
}

fn c7_separation(scans: &mut Scans) -> Outcome {
    const MB: usize = 1_000_000;
    let mut c = cluster(2, 700, 0.0, SelectionMode::Rendezvous);
    c.add("sink", "h2", &["--name", "sink", "--ip", "10.34.0.1"]).unwrap();
    let addr = c.listen("sink", 80).unwrap();
    c.add("remote", "h1", &[] as &[&str]).unwrap();
    c.add("local", "h2", &[] as &[&str]).unwrap();
    steps_until(&mut c, 30, |c| everyone_has(c, addr, 1)).ok_or("no spread")?;

    let mut counts = BTreeMap::new();
    for label in ["remote", "local"] {
        for size in [MB, 100 * MB] {
            let before = c.trap_messages(label).unwrap();
            let mut conn = c.open(label, addr).unwrap().map_err(|s| format!("{s:?}"))?;
            let echoed = c.transfer(&mut conn, size, 64 * 1024).map_err(|e| e.to_string())?;
            ensure!(echoed == size as u64, "{label} {size}: echoed {echoed}");
            c.close(conn).unwrap();
            counts.insert((label, size), c.trap_messages(label).unwrap() - before);
        }
    }
    for label in ["remote", "local"] {
        ensure!(
            counts[&(label, MB)] == counts[&(label, 100 * MB)],
            "{label}: {} vs {} trap messages",
            counts[&(label, MB)],
            counts[&(label, 100 * MB)]
        );
    }
    for h in ["h1", "h2"] {
        let s = &c.node(h).unwrap().switch.stats;
        ensure!(s.data_path_bytes == 0, "{h} copied {} bytes", s.data_path_bytes);
    }
    scans.record("separation", &c);
    Ok(format!(
        "trap messages per connection: remote {} (1 MB) = {} (100 MB), local {} = {}; data-path bytes 0",
        counts[&("remote", MB)],
        counts[&("remote", 100 * MB)],
        counts[&("local", MB)],
        counts[&("local", 100 * MB)]
    ))
}

struct RealHost {
    _dir: tempfile::TempDir,
    run: PathBuf,
    daemon: appnet::node::daemon::Daemon,
}

fn real_host(ip: Ipv4Addr, join: Option<RealEndpoint>, gateway: bool) -> RealHost {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = NodeConfig::new(RealEndpoint::new(ip, 0));
    cfg.join = join;
    cfg.gateway = gateway;
    cfg.run_dir = Some(dir.path().to_path_buf());
    let daemon = spawn(cfg).unwrap();
    RealHost {
        run: dir.path().to_path_buf(),
        _dir: dir,
        daemon,
    }
}

fn status(run: &Path) -> serde_json::Value {
    request(run, &ControlRequest::Status).unwrap().status.unwrap()
}

fn c8_gateway(scans: &mut Scans) -> Outcome {
    const MIB: usize = 1 << 20;
    // Simulated first: the finished proxy session's per-direction counts.
    let mut c = Cluster::new(800, Default::default());
    c.start("gw", StartOpts { gateway: true, ..Default::default() }).unwrap();
    c.start("in", StartOpts { join: Some("gw".into()), ..Default::default() }).unwrap();
    c.add("echo", "in", &["--name", "echo", "--ip", "10.35.0.1", "--expose", "31000"]).unwrap();
    c.listen("echo", 7).unwrap();
    steps_until(&mut c, 30, |c| {
        c.node("gw").unwrap().gateway.bindings().iter().any(|b| b.external_port == 31000)
    })
    .ok_or("sim binding never appeared")?;
    let o = c.external("gw", 31000, MIB).unwrap().ok_or("sim external connect refused")?;
    ensure!(o.intact && o.sent == MIB as u64 && o.echoed == MIB as u64, "sim {o:?}");
    ensure!(o.inbound == Some(MIB as u64) && o.outbound == Some(MIB as u64), "sim session {o:?}");
    ensure!(c.node("in").unwrap().switch.stats.data_path_bytes == 0, "inner node copied bytes");
    scans.record("gateway", &c);

    // Then real daemons and an unmodified TCP client.
    let gw = real_host(Ipv4Addr::new(127, 0, 0, 6), None, true);
    let inner = real_host(Ipv4Addr::new(127, 0, 0, 7), Some(gw.daemon.gossip_addr()), false);
    let r = request(
        &inner.run,
        &ControlRequest::Add {
            args: ["--name", "echo", "--ip", "10.35.0.2", "--expose", "31001"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        },
    )
    .unwrap();
    ensure!(r.ok, "add: {:?}", r.error);
    let vip: Ipv4Addr = r.vip.unwrap().parse().unwrap();
    let mut g = Generator::new(UnixTransport::connect(Path::new(&r.trap.unwrap())).unwrap());
    let lh = g.socket(HandleKind::Stream).unwrap();
    g.bind(lh, SocketAddrV4::new(vip, 7)).unwrap();
    g.listen(lh).unwrap();
    let (srv_in, srv_out) = (Arc::new(AtomicU64::new(0)), Arc::new(AtomicU64::new(0)));
    let (si, so) = (srv_in.clone(), srv_out.clone());
    thread::spawn(move || {
        while let Ok((_, mut s, _)) = g.accept(lh, Duration::from_secs(60)) {
            let mut buf = vec![0u8; 64 * 1024];
            while let Ok(n) = s.read(&mut buf) {
                if n == 0 {
                    break;
                }
                si.fetch_add(n as u64, Ordering::SeqCst);
                if s.write_all(&buf[..n]).is_err() {
                    break;
                }
                so.fetch_add(n as u64, Ordering::SeqCst);
            }
        }
    });
    let start = Instant::now();
    while !status(&gw.run)["bindings"]
        .as_array()
        .is_some_and(|b| b.iter().any(|x| x["port"] == 31001))
    {
        ensure!(start.elapsed() < Duration::from_secs(20), "real binding never appeared");
        thread::sleep(Duration::from_millis(50));
    }
    let before = status(&gw.run)["switch"]["data_path_bytes"].as_u64().unwrap();
    let ext = TcpStream::connect(SocketAddrV4::new(Ipv4Addr::new(127, 0, 0, 6), 31001))
        .map_err(|e| e.to_string())?;
    ext.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut w = ext.try_clone().unwrap();
    let feed = thread::spawn(move || {
        let block: Vec<u8> = (0..MIB).map(|i| (i * 13 % 256) as u8).collect();
        w.write_all(&block).unwrap();
        w.shutdown(std::net::Shutdown::Write).unwrap();
        block
    });
    let mut back = Vec::new();
    (&ext).read_to_end(&mut back).map_err(|e| e.to_string())?;
    let sent = feed.join().unwrap();
    ensure!(back == sent, "echo differs: {} bytes back", back.len());
    let start = Instant::now();
    let proxied = loop {
        let d = status(&gw.run)["switch"]["data_path_bytes"].as_u64().unwrap() - before;
        if d == 2 * MIB as u64 || start.elapsed() > Duration::from_secs(5) {
            break d;
        }
        thread::sleep(Duration::from_millis(20));
    };
    let (si, so) = (srv_in.load(Ordering::SeqCst), srv_out.load(Ordering::SeqCst));
    ensure!(si == MIB as u64 && so == MIB as u64, "service saw {si} in, {so} out");
    ensure!(proxied == 2 * MIB as u64, "gateway copied {proxied}");
    ensure!(status(&inner.run)["switch"]["data_path_bytes"] == 0, "inner node copied bytes");
    gw.daemon.shutdown();
    inner.daemon.shutdown();
    Ok(format!(
        "1 MiB each way conserved: sim session {}/{} bytes; real client->service {si}, service->client {so}, gateway copied {proxied}",
        o.inbound.unwrap(),
        o.outbound.unwrap()
    ))
}

fn c9_fast_path() -> Outcome {
    let r = bench::run(65536, Duration::from_secs(2)).map_err(|e| e.to_string())?;
    let tiny = bench::run(1, Duration::from_millis(500)).map_err(|e| e.to_string())?;
    println!("  {}", bench::BenchResult::CSV_HEADER);
    println!("  {}", r.csv_row());
    println!("  {}", tiny.csv_row());
    ensure!(
        r.local_bps >= r.hairpin_bps,
        "local {:.0} B/s < hairpin {:.0} B/s",
        r.local_bps,
        r.hairpin_bps
    );
    Ok(format!(
        "64 KiB: local {:.1} MB/s, hairpin {:.1} MB/s, ratio {:.2} (1 B ratio {:.2}, informational)",
        r.local_bps / 1e6,
        r.hairpin_bps / 1e6,
        r.ratio(),
        tiny.ratio()
    ))
}

fn c10_merge() -> Outcome {
    let ran = merge::check_merge_properties(10_000)?;
    ensure!(ran >= 10_000, "only {ran} cases");
    Ok(format!("{ran} cases: commutative, associative, idempotent, equal to max-incarnation oracle"))
}

#[test]
fn acceptance() {
    let mut scans = Scans::default();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Scans) -> Outcome>)> = vec![
        ("1 figure-1 segmentation", Box::new(c1_figure_one)),
        ("2 load balancing", Box::new(c2_load_balancing)),
        ("3 gossip convergence", Box::new(c3_convergence)),
        ("4 failure handling", Box::new(c4_failover)),
        ("6 dns", Box::new(c6_dns)),
        ("7 control/data separation", Box::new(c7_separation)),
        ("8 gateway", Box::new(c8_gateway)),
        // Runs last among the simulated ones so it sees every scan.
        ("5 identity consistency", Box::new(c5_identity)),
        ("9 same-host fast path", Box::new(|_: &mut Scans| c9_fast_path())),
        ("10 merge properties", Box::new(|_: &mut Scans| c10_merge())),
    ];
    let mut results = Vec::new();
    for (name, f) in criteria {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| f(&mut scans)))
            .unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let secs = start.elapsed().as_secs_f64();
        match &out {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(why) => println!("FAIL criterion {name}: {why} [{secs:.1}s]"),
        }
        results.push((name, out.is_ok()));
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
